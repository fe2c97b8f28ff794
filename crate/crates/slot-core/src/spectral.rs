//! Blackbody physics and wavenumber-grid utilities.
//!
//! All spectral quantities use the wavenumber convention: the band axis is
//! ν̃ in cm⁻¹ and spectral radiance is W·m⁻²·sr⁻¹·(cm⁻¹)⁻¹. Planck's law in
//! this convention reads
//!
//! ```text
//! B(ν̃, T) = c1·ν̃³ / (exp(c2·ν̃/T) − 1)
//! ```
//!
//! with `c1 = 2hc²·10⁸` and `c2 = hc/k_B·10²` built from the exact SI
//! (CODATA 2018) constants rather than hard-coded decimal literals.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Planck constant, J·s (exact, SI 2019).
pub const PLANCK_H: f64 = 6.62607015e-34;
/// Speed of light in vacuum, m/s (exact).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Boltzmann constant, J/K (exact).
pub const BOLTZMANN_KB: f64 = 1.380649e-23;

/// First radiation constant for wavenumber spectra in cm⁻¹,
/// W·m⁻²·sr⁻¹·(cm⁻¹)⁻⁴. Numerically ≈ 1.191042972e-8.
pub const RADIATION_C1: f64 = 2.0 * PLANCK_H * SPEED_OF_LIGHT * SPEED_OF_LIGHT * 1e8;
/// Second radiation constant, cm·K. Numerically ≈ 1.438776877.
pub const RADIATION_C2: f64 = PLANCK_H * SPEED_OF_LIGHT / BOLTZMANN_KB * 1e2;

/// Exponent threshold above which `exp(x) - 1` overflows f64; the Planck
/// radiance underflows to zero there instead of producing NaN/Inf.
const EXP_OVERFLOW: f64 = 700.0;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("grid needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("grid must be strictly increasing at index {0}")]
    NotIncreasing(usize),
    #[error("wavenumber at index {0} is not positive")]
    NonPositiveWavenumber(usize),
    #[error("invalid grid range: need 0 < a < b, got a={a}, b={b}")]
    InvalidRange { a: f64, b: f64 },
    #[error("grid step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("temperature must be positive, got {0} K")]
    NonPositiveTemperature(f64),
    #[error("brightness temperature undefined for radiance {0} <= 0")]
    UndefinedInverse(f64),
    #[error("spectrum length {got} does not match grid length {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("spectrum value at band {0} is not finite")]
    NonFiniteValue(usize),
}

/// Ordered wavenumber samples (cm⁻¹) defining the band axis of all spectra.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralGrid {
    values: Vec<f64>,
}

impl SpectralGrid {
    /// Builds a grid from explicit samples. Samples must be positive,
    /// strictly increasing, and at least two.
    pub fn new(values: Vec<f64>) -> Result<Self, SpectralError> {
        if values.len() < 2 {
            return Err(SpectralError::TooFewSamples(values.len()));
        }
        for (i, &v) in values.iter().enumerate() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(SpectralError::NonPositiveWavenumber(i));
            }
            if i > 0 && v <= values[i - 1] {
                return Err(SpectralError::NotIncreasing(i));
            }
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        *self.values.last().expect("grid is non-empty")
    }
}

/// A spectrum sampled on a [`SpectralGrid`], W·m⁻²·sr⁻¹·(cm⁻¹)⁻¹.
///
/// Physical spectra are nonnegative; measured (noisy) spectra may dip below
/// zero and are admitted through [`RadianceSpectrum::measured`].
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceSpectrum {
    values: Vec<f64>,
}

impl RadianceSpectrum {
    /// A physical spectrum: finite and nonnegative, length matching `grid`.
    pub fn physical(values: Vec<f64>, grid: &SpectralGrid) -> Result<Self, SpectralError> {
        if values.len() != grid.len() {
            return Err(SpectralError::LengthMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(SpectralError::NonFiniteValue(i));
            }
            if v < 0.0 {
                return Err(SpectralError::NonPositiveWavenumber(i));
            }
        }
        Ok(Self { values })
    }

    /// A measured spectrum: finite, but negative excursions are allowed.
    pub fn measured(values: Vec<f64>, grid: &SpectralGrid) -> Result<Self, SpectralError> {
        if values.len() != grid.len() {
            return Err(SpectralError::LengthMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(SpectralError::NonFiniteValue(i));
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Builds `{a, a+step, …}` truncated at `b` (inclusive up to rounding).
///
/// The sample count is `floor((b-a)/step) + 1` with a small relative guard
/// against floating-point shortfall, so `(870, 1269, 6)` yields 67 samples
/// ending at 1266.
pub fn wavenumber_grid(a: f64, b: f64, step: f64) -> Result<SpectralGrid, SpectralError> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(SpectralError::InvalidStep(step));
    }
    if !(a > 0.0) || !(a < b) || !a.is_finite() || !b.is_finite() {
        return Err(SpectralError::InvalidRange { a, b });
    }
    let n = ((b - a) / step + 1e-9).floor() as usize + 1;
    let values: Vec<f64> = (0..n).map(|i| a + i as f64 * step).collect();
    SpectralGrid::new(values)
}

/// Planck spectral radiance at a single wavenumber, W·m⁻²·sr⁻¹·(cm⁻¹)⁻¹.
///
/// When `c2·ν̃/T` exceeds the f64 exp range the radiance underflows to zero.
pub fn planck_band(temperature: f64, wavenumber: f64) -> f64 {
    let x = RADIATION_C2 * wavenumber / temperature;
    if x > EXP_OVERFLOW {
        return 0.0;
    }
    RADIATION_C1 * wavenumber.powi(3) / x.exp_m1()
}

/// Planck spectral radiance over a whole grid.
pub fn planck_radiance(
    temperature: f64,
    grid: &SpectralGrid,
) -> Result<RadianceSpectrum, SpectralError> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(SpectralError::NonPositiveTemperature(temperature));
    }
    let values = grid
        .values()
        .iter()
        .map(|&nu| planck_band(temperature, nu))
        .collect();
    RadianceSpectrum::physical(values, grid)
}

/// ∂B/∂T at a single band: `c1·c2·ν̃⁴/T² · eˣ/(eˣ−1)²` with `x = c2·ν̃/T`.
pub fn planck_band_dt(temperature: f64, wavenumber: f64) -> f64 {
    let x = RADIATION_C2 * wavenumber / temperature;
    if x > EXP_OVERFLOW {
        return 0.0;
    }
    let ex = x.exp();
    let em1 = x.exp_m1();
    RADIATION_C1 * RADIATION_C2 * wavenumber.powi(4) / (temperature * temperature) * ex
        / (em1 * em1)
}

/// The unique temperature whose Planck radiance at `wavenumber` equals
/// `radiance`: `T = c2·ν̃ / ln(1 + c1·ν̃³/radiance)`.
pub fn brightness_temperature(radiance: f64, wavenumber: f64) -> Result<f64, SpectralError> {
    if !(radiance > 0.0) || !radiance.is_finite() {
        return Err(SpectralError::UndefinedInverse(radiance));
    }
    let arg = RADIATION_C1 * wavenumber.powi(3) / radiance;
    Ok(RADIATION_C2 * wavenumber / arg.ln_1p())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Golden values computed with a 50-digit arbitrary-precision evaluation
    /// of B(ν̃,T) from the exact SI constants (independent oracle).
    const GOLDEN: &[(f64, f64, f64)] = &[
        (300.0, 1000.0, 0.09924033330070694666139),
        (310.0, 870.0, 0.1407968987162723814604),
        (310.0, 1266.0, 0.06801907273683589979217),
        (290.0, 1000.0, 0.08400687383102908437663),
        (260.0, 1000.0, 0.04724616391676826881612),
    ];

    #[test]
    fn radiation_constants_match_oracle() {
        assert_relative_eq!(RADIATION_C1, 1.191042972397188414079489e-8, max_relative = 1e-14);
        assert_relative_eq!(RADIATION_C2, 1.438776877503933802146672, max_relative = 1e-14);
    }

    #[test]
    fn planck_matches_high_precision_oracle() {
        for &(t, nu, expected) in GOLDEN {
            assert_relative_eq!(planck_band(t, nu), expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn experimental_grid_has_67_samples() {
        let g = wavenumber_grid(870.0, 1269.0, 6.0).unwrap();
        assert_eq!(g.len(), 67);
        assert_eq!(g.min(), 870.0);
        assert_eq!(g.max(), 1266.0);
    }

    #[test]
    fn tiny_range_grid_rejected() {
        assert!(matches!(
            wavenumber_grid(1000.0, 1000.5, 1.0),
            Err(SpectralError::TooFewSamples(1))
        ));
    }

    #[test]
    fn three_sample_grid() {
        let g = wavenumber_grid(900.0, 912.0, 6.0).unwrap();
        assert_eq!(g.values(), &[900.0, 906.0, 912.0]);
    }

    #[test]
    fn grid_rejects_bad_arguments() {
        assert!(wavenumber_grid(900.0, 800.0, 6.0).is_err());
        assert!(wavenumber_grid(900.0, 1000.0, 0.0).is_err());
        assert!(wavenumber_grid(900.0, 1000.0, -3.0).is_err());
        assert!(wavenumber_grid(-10.0, 1000.0, 6.0).is_err());
    }

    #[test]
    fn grid_new_validates() {
        assert!(SpectralGrid::new(vec![870.0]).is_err());
        assert!(SpectralGrid::new(vec![870.0, 870.0]).is_err());
        assert!(SpectralGrid::new(vec![870.0, 860.0]).is_err());
        assert!(SpectralGrid::new(vec![-1.0, 860.0]).is_err());
    }

    #[test]
    fn planck_monotone_in_temperature() {
        let grid = wavenumber_grid(870.0, 1269.0, 6.0).unwrap();
        let lo = planck_radiance(300.0, &grid).unwrap();
        let hi = planck_radiance(300.5, &grid).unwrap();
        for (a, b) in lo.values().iter().zip(hi.values()) {
            assert!(b > a);
        }
    }

    #[test]
    fn wien_tail_underflows_to_zero() {
        let grid = wavenumber_grid(870.0, 1269.0, 6.0).unwrap();
        let cold = planck_radiance(1.0, &grid).unwrap();
        let warm = planck_radiance(300.0, &grid).unwrap();
        for (c, w) in cold.values().iter().zip(warm.values()) {
            assert!(*c < 1e-30 * w);
        }
    }

    #[test]
    fn planck_rejects_nonpositive_temperature() {
        let grid = wavenumber_grid(870.0, 1269.0, 6.0).unwrap();
        assert!(planck_radiance(0.0, &grid).is_err());
        assert!(planck_radiance(-5.0, &grid).is_err());
    }

    #[test]
    fn brightness_temperature_round_trip() {
        for &nu in &[870.0, 1000.0, 1266.0] {
            let b = planck_band(310.0, nu);
            let t = brightness_temperature(b, nu).unwrap();
            assert_relative_eq!(t, 310.0, max_relative = 1e-9);
        }
    }

    #[test]
    fn brightness_temperature_rejects_nonpositive() {
        assert!(brightness_temperature(0.0, 1000.0).is_err());
        assert!(brightness_temperature(-1.0, 1000.0).is_err());
    }

    #[test]
    fn brightness_temperature_monotone_in_radiance() {
        let l = planck_band(300.0, 1000.0);
        let t1 = brightness_temperature(l, 1000.0).unwrap();
        let t2 = brightness_temperature(2.0 * l, 1000.0).unwrap();
        assert!(t2 > t1);
    }

    #[test]
    fn analytic_dt_matches_finite_differences() {
        for &(t, nu) in &[(250.0_f64, 900.0_f64), (300.0, 1000.0), (350.0, 1266.0)] {
            let h = t * 1e-6;
            let fd = (planck_band(t + h, nu) - planck_band(t - h, nu)) / (2.0 * h);
            assert_relative_eq!(planck_band_dt(t, nu), fd, max_relative = 1e-7);
        }
    }

    proptest! {
        #[test]
        fn round_trip_within_1e9_relative(t in 200.0_f64..400.0, nu in 870.0_f64..1266.0) {
            let b = planck_band(t, nu);
            let back = brightness_temperature(b, nu).unwrap();
            prop_assert!((back - t).abs() < 1e-9 * t);
        }

        #[test]
        fn radiance_finite_positive(t in 1.0_f64..10_000.0, nu in 870.0_f64..1266.0) {
            let b = planck_band(t, nu);
            prop_assert!(b.is_finite());
            prop_assert!(b >= 0.0);
            // Only the deep Wien tail may underflow to exactly zero.
            if RADIATION_C2 * nu / t <= 700.0 {
                prop_assert!(b > 0.0);
            }
        }

        #[test]
        fn bandwise_strictly_monotone(t in 200.0_f64..400.0, nu in 870.0_f64..1266.0) {
            prop_assert!(planck_band(t + 0.01, nu) > planck_band(t, nu));
        }
    }
}
