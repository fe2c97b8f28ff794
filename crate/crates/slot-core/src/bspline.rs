//! Clamped cubic B-spline basis and the second-order difference penalty.
//!
//! The emissivity model is `e(ν) = Φ(ν)·β` with `Φ` a clamped cubic
//! B-spline basis on `[a, b]` and uniform interior knots. Smoothness is
//! penalized through the banded operator `D` with stencil `(1, −2, 1)`,
//! which annihilates affine coefficient sequences.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectral::SpectralGrid;

/// Spline degree is fixed at cubic.
pub const DEGREE: usize = 3;

#[derive(Debug, Error)]
pub enum BsplineError {
    #[error("need at least {min} coefficients, got {got}")]
    TooFewCoefficients { min: usize, got: usize },
    #[error("invalid domain: need a < b, got a={a}, b={b}")]
    InvalidDomain { a: f64, b: f64 },
    #[error("evaluation point {value} outside domain [{a}, {b}]")]
    OutOfDomain { value: f64, a: f64, b: f64 },
    #[error("coefficient vector has length {got}, basis expects {expected}")]
    CoefficientLength { expected: usize, got: usize },
}

/// Clamped cubic B-spline basis with `K` coefficients on `[a, b]`.
///
/// The knot vector has length `K + 4`: four copies of `a`, `K − 4`
/// equispaced interior knots, four copies of `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    a: f64,
    b: f64,
    coeff_count: usize,
    knots: Vec<f64>,
}

impl SplineBasis {
    /// Builds the basis. `K ≥ 4` so at least a full cubic segment exists.
    pub fn new(a: f64, b: f64, coeff_count: usize) -> Result<Self, BsplineError> {
        if coeff_count < 4 {
            return Err(BsplineError::TooFewCoefficients {
                min: 4,
                got: coeff_count,
            });
        }
        if !(a < b) || !a.is_finite() || !b.is_finite() {
            return Err(BsplineError::InvalidDomain { a, b });
        }
        let k = coeff_count;
        let mut knots = Vec::with_capacity(k + 4);
        knots.extend_from_slice(&[a; 4]);
        let segments = (k - 3) as f64;
        for j in 1..=(k - 4) {
            knots.push(a + j as f64 * (b - a) / segments);
        }
        knots.extend_from_slice(&[b; 4]);
        Ok(Self {
            a,
            b,
            coeff_count: k,
            knots,
        })
    }

    /// Basis covering a grid's full range.
    pub fn for_grid(grid: &SpectralGrid, coeff_count: usize) -> Result<Self, BsplineError> {
        Self::new(grid.min(), grid.max(), coeff_count)
    }

    pub fn coeff_count(&self) -> usize {
        self.coeff_count
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.a, self.b)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Knot span index `s` with `t[s] <= x < t[s+1]` (right-closed at `b`).
    fn span(&self, x: f64) -> usize {
        let k = self.coeff_count;
        if x >= self.b {
            return k - 1;
        }
        // spans run from DEGREE to K-1; binary search over interior knots
        let mut lo = DEGREE;
        let mut hi = k - 1;
        while lo < hi {
            let mid = (lo + hi + 1) / 2;
            if self.knots[mid] <= x {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        lo
    }

    /// The four basis values `φ_{s−3..s}(x)` and the span `s`.
    ///
    /// Triangular recurrence over the local knot window; each output is
    /// nonnegative and the four values sum to one.
    pub fn eval_nonzero(&self, x: f64) -> Result<([f64; 4], usize), BsplineError> {
        if !(x >= self.a && x <= self.b) {
            return Err(BsplineError::OutOfDomain {
                value: x,
                a: self.a,
                b: self.b,
            });
        }
        let s = self.span(x);
        let t = &self.knots;
        let mut n = [1.0_f64, 0.0, 0.0, 0.0];
        let mut left = [0.0_f64; 4];
        let mut right = [0.0_f64; 4];
        for j in 1..=DEGREE {
            left[j] = x - t[s + 1 - j];
            right[j] = t[s + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        Ok((n, s))
    }

    /// Design matrix `Φ` (grid length × K), rows summing to one with at
    /// most four nonzeros.
    pub fn design_matrix(&self, grid: &SpectralGrid) -> Result<DMatrix<f64>, BsplineError> {
        let n = grid.len();
        let k = self.coeff_count;
        let mut phi = DMatrix::zeros(n, k);
        for (i, &x) in grid.values().iter().enumerate() {
            let (vals, s) = self.eval_nonzero(x)?;
            for (j, &v) in vals.iter().enumerate() {
                phi[(i, s - DEGREE + j)] = v;
            }
        }
        Ok(phi)
    }

    /// Evaluates `Φ(x)·β`.
    pub fn eval(&self, coeffs: &[f64], x: f64) -> Result<f64, BsplineError> {
        if coeffs.len() != self.coeff_count {
            return Err(BsplineError::CoefficientLength {
                expected: self.coeff_count,
                got: coeffs.len(),
            });
        }
        let (vals, s) = self.eval_nonzero(x)?;
        Ok(vals
            .iter()
            .enumerate()
            .map(|(j, &v)| v * coeffs[s - DEGREE + j])
            .sum())
    }
}

/// Second-order difference operator `D`: `(K−2)×K` rows of `(1, −2, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyOperator {
    coeff_count: usize,
}

impl PenaltyOperator {
    pub fn new(coeff_count: usize) -> Result<Self, BsplineError> {
        if coeff_count < 3 {
            return Err(BsplineError::TooFewCoefficients {
                min: 3,
                got: coeff_count,
            });
        }
        Ok(Self { coeff_count })
    }

    pub fn rows(&self) -> usize {
        self.coeff_count - 2
    }

    pub fn coeff_count(&self) -> usize {
        self.coeff_count
    }

    /// `D·β` as a dense vector of second differences.
    pub fn apply(&self, beta: &[f64]) -> Vec<f64> {
        assert_eq!(beta.len(), self.coeff_count, "coefficient length mismatch");
        beta.windows(3)
            .map(|w| w[0] - 2.0 * w[1] + w[2])
            .collect()
    }

    /// `‖D·β‖₂²`.
    pub fn quadratic(&self, beta: &[f64]) -> f64 {
        assert_eq!(beta.len(), self.coeff_count, "coefficient length mismatch");
        beta.windows(3)
            .map(|w| {
                let d = w[0] - 2.0 * w[1] + w[2];
                d * d
            })
            .sum()
    }

    /// Dense `D` matrix, mostly for tests and small solves.
    pub fn matrix(&self) -> DMatrix<f64> {
        let k = self.coeff_count;
        let mut d = DMatrix::zeros(k - 2, k);
        for j in 0..k - 2 {
            d[(j, j)] = 1.0;
            d[(j, j + 1)] = -2.0;
            d[(j, j + 2)] = 1.0;
        }
        d
    }

    /// Gram matrix `DᵀD` (K×K, pentadiagonal), used by the normal equations.
    pub fn gram(&self) -> DMatrix<f64> {
        let d = self.matrix();
        d.transpose() * d
    }

    /// `Dᵀ(D·β)` as a vector, for KKT/gradient checks.
    pub fn gram_apply(&self, beta: &DVector<f64>) -> DVector<f64> {
        let diffs = self.apply(beta.as_slice());
        let k = self.coeff_count;
        let mut out = DVector::zeros(k);
        for (j, &d) in diffs.iter().enumerate() {
            out[j] += d;
            out[j + 1] += -2.0 * d;
            out[j + 2] += d;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::wavenumber_grid;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Independent naive Cox–de Boor recursion used as the test oracle.
    fn cox_de_boor(knots: &[f64], i: usize, p: usize, x: f64, b: f64) -> f64 {
        if p == 0 {
            let in_half_open = knots[i] <= x && x < knots[i + 1];
            let at_right_end = x == b && knots[i] < knots[i + 1] && knots[i + 1] == b;
            return if in_half_open || at_right_end { 1.0 } else { 0.0 };
        }
        let mut total = 0.0;
        let d1 = knots[i + p] - knots[i];
        if d1 > 0.0 {
            total += (x - knots[i]) / d1 * cox_de_boor(knots, i, p - 1, x, b);
        }
        let d2 = knots[i + p + 1] - knots[i + 1];
        if d2 > 0.0 {
            total += (knots[i + p + 1] - x) / d2 * cox_de_boor(knots, i + 1, p - 1, x, b);
        }
        total
    }

    fn full_row_oracle(basis: &SplineBasis, x: f64) -> Vec<f64> {
        (0..basis.coeff_count())
            .map(|i| cox_de_boor(basis.knots(), i, DEGREE, x, basis.domain().1))
            .collect()
    }

    fn full_row(basis: &SplineBasis, x: f64) -> Vec<f64> {
        let (vals, s) = basis.eval_nonzero(x).unwrap();
        let mut row = vec![0.0; basis.coeff_count()];
        for (j, &v) in vals.iter().enumerate() {
            row[s - DEGREE + j] = v;
        }
        row
    }

    #[test]
    fn minimal_basis_has_no_interior_knots() {
        let b = SplineBasis::new(870.0, 1266.0, 4).unwrap();
        assert_eq!(b.knots(), &[870.0; 4].iter().chain([1266.0; 4].iter()).copied().collect::<Vec<_>>()[..]);
    }

    #[test]
    fn twelve_coefficients_give_eight_uniform_interior_knots() {
        let b = SplineBasis::new(870.0, 1266.0, 12).unwrap();
        let interior = &b.knots()[4..12];
        let h = 396.0 / 9.0;
        for (j, &t) in interior.iter().enumerate() {
            assert_relative_eq!(t, 870.0 + (j as f64 + 1.0) * h, max_relative = 1e-14);
        }
    }

    #[test]
    fn inverted_domain_rejected() {
        assert!(SplineBasis::new(1266.0, 870.0, 12).is_err());
        assert!(SplineBasis::new(870.0, 1266.0, 3).is_err());
    }

    #[test]
    fn clamped_endpoint_rows() {
        let basis = SplineBasis::new(870.0, 1266.0, 12).unwrap();
        let row_a = full_row(&basis, 870.0);
        let row_b = full_row(&basis, 1266.0);
        assert_relative_eq!(row_a[0], 1.0, max_relative = 1e-14);
        assert!(row_a[1..].iter().all(|&v| v.abs() < 1e-14));
        assert_relative_eq!(row_b[11], 1.0, max_relative = 1e-14);
        assert!(row_b[..11].iter().all(|&v| v.abs() < 1e-14));
    }

    #[test]
    fn partition_of_unity_on_grid() {
        let grid = wavenumber_grid(870.0, 1269.0, 6.0).unwrap();
        let basis = SplineBasis::for_grid(&grid, 12).unwrap();
        let phi = basis.design_matrix(&grid).unwrap();
        for i in 0..phi.nrows() {
            let sum: f64 = phi.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(phi.row(i).iter().all(|&v| v >= 0.0));
            assert!(phi.row(i).iter().filter(|&&v| v != 0.0).count() <= 4);
        }
    }

    #[test]
    fn constant_coefficients_reproduce_constant() {
        let basis = SplineBasis::new(870.0, 1266.0, 4).unwrap();
        let beta = vec![0.5; 4];
        for x in [870.0, 900.0, 1000.0, 1100.0, 1266.0] {
            assert_relative_eq!(basis.eval(&beta, x).unwrap(), 0.5, max_relative = 1e-13);
        }
    }

    #[test]
    fn out_of_domain_rejected() {
        let basis = SplineBasis::new(870.0, 1266.0, 12).unwrap();
        assert!(basis.eval(&vec![0.5; 12], 869.9).is_err());
        assert!(basis.eval(&vec![0.5; 12], 1266.1).is_err());
        let bad_grid = wavenumber_grid(860.0, 1266.0, 6.0).unwrap();
        assert!(basis.design_matrix(&bad_grid).is_err());
    }

    #[test]
    fn agreement_with_recursive_oracle() {
        use rand::{Rng, SeedableRng};
        let basis = SplineBasis::new(870.0, 1266.0, 12).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let x: f64 = rng.gen_range(870.0..=1266.0);
            let ours = full_row(&basis, x);
            let oracle = full_row_oracle(&basis, x);
            for (a, b) in ours.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12, "x={x}: {a} vs {b}");
            }
        }
        // endpoints too
        for x in [870.0, 1266.0] {
            let ours = full_row(&basis, x);
            let oracle = full_row_oracle(&basis, x);
            for (a, b) in ours.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn second_difference_examples() {
        let d5 = PenaltyOperator::new(5).unwrap();
        assert_eq!(d5.apply(&[1.0, 2.0, 3.0, 4.0, 5.0]), vec![0.0, 0.0, 0.0]);

        let d4 = PenaltyOperator::new(4).unwrap();
        assert_eq!(d4.apply(&[0.0, 1.0, 0.0, 1.0]), vec![-2.0, 2.0]);

        let d3 = PenaltyOperator::new(3).unwrap();
        let m = d3.matrix();
        assert_eq!(m.nrows(), 1);
        assert_eq!(m[(0, 0)], 1.0);
        assert_eq!(m[(0, 1)], -2.0);
        assert_eq!(m[(0, 2)], 1.0);

        assert!(PenaltyOperator::new(2).is_err());
    }

    #[test]
    fn gram_apply_matches_dense() {
        let d = PenaltyOperator::new(8).unwrap();
        let beta = DVector::from_fn(8, |i, _| (i as f64 * 0.77).sin());
        let dense = d.gram() * &beta;
        let fast = d.gram_apply(&beta);
        for (a, b) in dense.iter().zip(fast.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-13);
        }
    }

    proptest! {
        #[test]
        fn convex_hull_property(x in 870.0_f64..1266.0, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let basis = SplineBasis::new(870.0, 1266.0, 12).unwrap();
            let beta: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let v = basis.eval(&beta, x).unwrap();
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v));
        }

        #[test]
        fn affine_null_space(p in -5.0_f64..5.0, q in -5.0_f64..5.0) {
            let d = PenaltyOperator::new(12).unwrap();
            let beta: Vec<f64> = (0..12).map(|k| p + q * k as f64).collect();
            for v in d.apply(&beta) {
                prop_assert!(v.abs() < 1e-10);
            }
        }

        #[test]
        fn quadratic_invariant_under_affine_shift(
            seed in 0u64..1000, p in -2.0_f64..2.0, q in -2.0_f64..2.0,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let d = PenaltyOperator::new(12).unwrap();
            let beta: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let shifted: Vec<f64> = beta
                .iter()
                .enumerate()
                .map(|(k, &b)| b + p + q * k as f64)
                .collect();
            let d0 = d.quadratic(&beta);
            let d1 = d.quadratic(&shifted);
            prop_assert!((d0 - d1).abs() <= 1e-9 * (1.0 + d0.abs()));
        }
    }
}
