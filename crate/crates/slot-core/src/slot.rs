//! SLOT: per-pixel recovery of `{T, V, β}` from a measured spectrum by
//! smoothness-regularized, bound-constrained least squares.
//!
//! The model is linear in the spline coefficients once `(T, V)` are fixed:
//!
//! ```text
//! M_ν = X_ν(V) + (B_ν(T) − X_ν(V))·Φ(ν)β
//! ```
//!
//! so the solver profiles β out exactly — normal equations first, then an
//! active-set pass when any coefficient leaves `[0, 1]` — and searches the
//! remaining 2-D `(T, V)` landscape with a coarse grid followed by
//! golden-section coordinate descent on a shrinking bracket. The β
//! subproblem is strictly convex for `λ > 0`, so its minimizer is unique;
//! the outer landscape may be multimodal, which is why the coarse grid
//! comes first.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bspline::{BsplineError, PenaltyOperator, SplineBasis};
use crate::forward::{AmbientSpectra, ForwardError, HyperCube};
use crate::spectral::{brightness_temperature, planck_band, planck_band_dt, SpectralError};

#[derive(Debug, Error)]
pub enum SlotError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("cube and ambient spectral grids do not match")]
    GridMismatch,
    #[error("beta subproblem is singular; the data matrix is rank-deficient, use lambda > 0")]
    IllPosed,
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Bspline(#[from] BsplineError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

fn default_lambda() -> f64 {
    0.22
}

fn default_basis_coeffs() -> usize {
    12
}

fn default_t_margin() -> f64 {
    20.0
}

fn default_t_step() -> f64 {
    1.0
}

fn default_v_step() -> f64 {
    0.05
}

fn default_refine_tol_factor() -> f64 {
    1e-10
}

fn default_max_refine_sweeps() -> usize {
    60
}

fn default_v_sensitivity_threshold() -> f64 {
    1e-5
}

/// Solver configuration. All fields have sensible defaults; a JSON config
/// file may override any subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotConfig {
    /// Smoothness weight λ in `½Σw(S−M)² + (λ/2)‖Dβ‖²`.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Spline coefficient count K.
    #[serde(default = "default_basis_coeffs")]
    pub basis_coeffs: usize,
    /// Fixed temperature search range; when absent the range is derived per
    /// pixel from the brightness temperature of its max-radiance band.
    #[serde(default)]
    pub t_range: Option<(f64, f64)>,
    /// Margin around the per-pixel brightness temperature, kelvin.
    #[serde(default = "default_t_margin")]
    pub t_margin: f64,
    /// Coarse temperature grid step, kelvin.
    #[serde(default = "default_t_step")]
    pub t_step: f64,
    /// Coarse view-factor grid step.
    #[serde(default = "default_v_step")]
    pub v_step: f64,
    /// Refinement stops when an objective sweep improves by less than this
    /// factor times the initial coarse objective.
    #[serde(default = "default_refine_tol_factor")]
    pub refine_tol_factor: f64,
    #[serde(default = "default_max_refine_sweeps")]
    pub max_refine_sweeps: usize,
    /// Per-band weights; `None` means all ones.
    #[serde(default)]
    pub band_weights: Option<Vec<f64>>,
    /// Pixels whose relative V-sensitivity falls below this are flagged as
    /// V-unidentifiable (blackbody-like or degenerate ambient).
    #[serde(default = "default_v_sensitivity_threshold")]
    pub v_sensitivity_threshold: f64,
}

impl Default for SlotConfig {
    fn default() -> Self {
        Self {
            lambda: default_lambda(),
            basis_coeffs: default_basis_coeffs(),
            t_range: None,
            t_margin: default_t_margin(),
            t_step: default_t_step(),
            v_step: default_v_step(),
            refine_tol_factor: default_refine_tol_factor(),
            max_refine_sweeps: default_max_refine_sweeps(),
            band_weights: None,
            v_sensitivity_threshold: default_v_sensitivity_threshold(),
        }
    }
}

impl SlotConfig {
    pub fn validate(&self, bands: usize) -> Result<(), SlotError> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(SlotError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.basis_coeffs < 4 {
            return Err(SlotError::Config(format!(
                "basis_coeffs must be >= 4, got {}",
                self.basis_coeffs
            )));
        }
        if let Some((lo, hi)) = self.t_range {
            if !(lo > 0.0 && lo < hi) {
                return Err(SlotError::Config(format!("invalid t_range ({lo}, {hi})")));
            }
        }
        if !(self.t_margin > 0.0) || !(self.t_step > 0.0) || !(self.v_step > 0.0 && self.v_step <= 1.0) {
            return Err(SlotError::Config("t_margin, t_step, v_step must be positive".into()));
        }
        if !(self.refine_tol_factor > 0.0) {
            return Err(SlotError::Config("refine_tol_factor must be positive".into()));
        }
        if let Some(w) = &self.band_weights {
            if w.len() != bands {
                return Err(SlotError::Config(format!(
                    "band_weights length {} does not match {} bands",
                    w.len(),
                    bands
                )));
            }
            if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(SlotError::Config("band_weights must be finite and nonnegative".into()));
            }
        }
        Ok(())
    }
}

/// Per-pixel decomposition output with convergence diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelSolution {
    pub temperature: f64,
    pub view_factor: f64,
    pub beta: Vec<f64>,
    /// `½·Σ w_ν(S_ν−M_ν)² + (λ/2)·‖Dβ‖²`.
    pub objective: f64,
    /// `sqrt(Σ w_ν(S_ν−M_ν)²)`.
    pub residual_norm: f64,
    /// `‖Dβ‖₂`.
    pub penalty_norm: f64,
    pub refine_sweeps: usize,
    /// Number of coefficients pinned at 0 or 1.
    pub active_bounds: usize,
    /// `Σ w((1−e)Δ)² / Σ w S²` — the relative leverage V has on the model.
    pub v_sensitivity: f64,
    pub v_identifiable: bool,
    /// Objective after the coarse stage and after each refinement sweep;
    /// non-increasing by construction.
    pub objective_trace: Vec<f64>,
}

/// Whole-cube decomposition output.
#[derive(Debug, Clone, PartialEq)]
pub struct TexResult {
    pub width: usize,
    pub height: usize,
    pub coeff_count: usize,
    pub temperature: Vec<f64>,
    pub view_factor: Vec<f64>,
    /// Pixel-major `H·W × K`.
    pub beta: Vec<f64>,
    pub residual_norm: Vec<f64>,
    pub objective: Vec<f64>,
    pub active_bounds: Vec<u16>,
    pub v_identifiable: Vec<bool>,
    pub config: SlotConfig,
}

impl TexResult {
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn beta_at(&self, pixel: usize) -> &[f64] {
        &self.beta[pixel * self.coeff_count..(pixel + 1) * self.coeff_count]
    }
}

/// Precomputed per-run state shared by every pixel.
pub struct SolverContext<'a> {
    ambient: &'a AmbientSpectra,
    pub basis: SplineBasis,
    penalty: PenaltyOperator,
    /// Per band: first covered coefficient and the four basis values.
    phi_rows: Vec<(usize, [f64; 4])>,
    lambda_gram: DMatrix<f64>,
    weights: Vec<f64>,
    config: SlotConfig,
}

impl<'a> SolverContext<'a> {
    pub fn new(ambient: &'a AmbientSpectra, config: SlotConfig) -> Result<Self, SlotError> {
        config.validate(ambient.len())?;
        let basis = SplineBasis::for_grid(ambient.grid(), config.basis_coeffs)?;
        let penalty = PenaltyOperator::new(config.basis_coeffs)?;
        let mut phi_rows = Vec::with_capacity(ambient.len());
        for &nu in ambient.grid().values() {
            let (vals, span) = basis.eval_nonzero(nu)?;
            phi_rows.push((span - 3, vals));
        }
        let lambda_gram = penalty.gram() * config.lambda;
        let weights = config
            .band_weights
            .clone()
            .unwrap_or_else(|| vec![1.0; ambient.len()]);
        Ok(Self {
            ambient,
            basis,
            penalty,
            phi_rows,
            lambda_gram,
            weights,
            config,
        })
    }

    pub fn config(&self) -> &SlotConfig {
        &self.config
    }

    fn bands(&self) -> usize {
        self.phi_rows.len()
    }

    fn coeff_count(&self) -> usize {
        self.config.basis_coeffs
    }
}

/// Scratch buffers reused across the many `(T, V)` evaluations of one pixel.
struct Workspace {
    b_t: Vec<f64>,
    h: DMatrix<f64>,
    g: DVector<f64>,
    qp: BoxQp,
}

impl Workspace {
    fn new(bands: usize, k: usize) -> Self {
        Self {
            b_t: vec![0.0; bands],
            h: DMatrix::zeros(k, k),
            g: DVector::zeros(k),
            qp: BoxQp::new(k),
        }
    }

    fn set_temperature(&mut self, t: f64, ctx: &SolverContext) {
        for (b, &nu) in ctx.ambient.grid().values().iter().enumerate() {
            self.b_t[b] = planck_band(t, nu);
        }
    }
}

/// The fit produced by one β subproblem solve.
#[derive(Debug, Clone)]
pub struct BetaFit {
    pub beta: DVector<f64>,
    pub objective: f64,
    pub residual_sq: f64,
    pub penalty_sq: f64,
    pub active_bounds: usize,
}

/// Assembles and solves the β subproblem at fixed `(T, V)`:
/// `argmin_{β∈[0,1]^K} ½‖W^½(Aβ − y)‖² + (λ/2)‖Dβ‖²` with
/// `A = diag(B−X)Φ`, `y = S − X`.
fn beta_subproblem(
    ctx: &SolverContext,
    ws: &mut Workspace,
    spectrum: &[f64],
    v: f64,
) -> Result<BetaFit, SlotError> {
    let k = ctx.coeff_count();
    let n = ctx.bands();
    ws.h.copy_from(&ctx.lambda_gram);
    ws.g.fill(0.0);
    for band in 0..n {
        let w = ctx.weights[band];
        if w == 0.0 {
            continue;
        }
        let x = v * ctx.ambient.sky()[band] + (1.0 - v) * ctx.ambient.ground()[band];
        let d = ws.b_t[band] - x;
        let y = spectrum[band] - x;
        let (start, vals) = ctx.phi_rows[band];
        let wd = w * d;
        let wd2 = wd * d;
        for a in 0..4 {
            let ia = start + a;
            ws.g[ia] += wd * vals[a] * y;
            for b in a..4 {
                ws.h[(ia, start + b)] += wd2 * vals[a] * vals[b];
            }
        }
    }
    // mirror the upper triangle (band loop fills upper blocks only)
    for i in 0..k {
        for j in 0..i {
            ws.h[(i, j)] = ws.h[(j, i)];
        }
    }
    let beta = ws.qp.solve(&ws.h, &ws.g)?;

    // objective from the fitted coefficients
    let mut residual_sq = 0.0;
    for band in 0..n {
        let w = ctx.weights[band];
        if w == 0.0 {
            continue;
        }
        let x = v * ctx.ambient.sky()[band] + (1.0 - v) * ctx.ambient.ground()[band];
        let d = ws.b_t[band] - x;
        let y = spectrum[band] - x;
        let (start, vals) = ctx.phi_rows[band];
        let mut e = 0.0;
        for a in 0..4 {
            e += vals[a] * beta[start + a];
        }
        let r = d * e - y;
        residual_sq += w * r * r;
    }
    let penalty_sq = ctx.penalty.quadratic(beta.as_slice());
    let objective = 0.5 * residual_sq + 0.5 * ctx.config.lambda * penalty_sq;
    let active_bounds = beta
        .iter()
        .filter(|&&b| b <= 1e-9 || b >= 1.0 - 1e-9)
        .count();
    Ok(BetaFit {
        beta: beta.clone_owned(),
        objective,
        residual_sq,
        penalty_sq,
        active_bounds,
    })
}

/// Box-constrained convex QP `min ½βᵀHβ − gᵀβ, 0 ≤ β ≤ 1` by primal
/// active set. The unconstrained Newton point is tried first; when it is
/// feasible no active-set iterations run at all.
struct BoxQp {
    k: usize,
    beta: DVector<f64>,
    state: Vec<BoundState>,
    reduced: DMatrix<f64>,
    rhs: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BoundState {
    Free,
    Lower,
    Upper,
}

impl BoundState {
    fn value(self) -> f64 {
        match self {
            BoundState::Lower => 0.0,
            BoundState::Upper => 1.0,
            BoundState::Free => unreachable!("free variables carry no bound value"),
        }
    }
}

const BOUND_TOL: f64 = 1e-12;

impl BoxQp {
    fn new(k: usize) -> Self {
        Self {
            k,
            beta: DVector::zeros(k),
            state: vec![BoundState::Free; k],
            reduced: DMatrix::zeros(k, k),
            rhs: DVector::zeros(k),
        }
    }

    fn solve(&mut self, h: &DMatrix<f64>, g: &DVector<f64>) -> Result<&DVector<f64>, SlotError> {
        let chol = Cholesky::new(h.clone()).ok_or(SlotError::IllPosed)?;
        let unconstrained = chol.solve(g);
        if unconstrained
            .iter()
            .all(|&b| (-BOUND_TOL..=1.0 + BOUND_TOL).contains(&b))
        {
            self.beta.copy_from(&unconstrained);
            for b in self.beta.iter_mut() {
                *b = b.clamp(0.0, 1.0);
            }
            return Ok(&self.beta);
        }
        // active-set start: clamp the Newton point
        for (i, &b) in unconstrained.iter().enumerate() {
            self.state[i] = if b < 0.0 {
                BoundState::Lower
            } else if b > 1.0 {
                BoundState::Upper
            } else {
                BoundState::Free
            };
            self.beta[i] = b.clamp(0.0, 1.0);
        }
        self.active_set_iterations(h, g)?;
        Ok(&self.beta)
    }

    #[cfg(test)]
    fn solve_with_start(
        &mut self,
        h: &DMatrix<f64>,
        g: &DVector<f64>,
        start: &[BoundState],
    ) -> Result<&DVector<f64>, SlotError> {
        self.state.copy_from_slice(start);
        for i in 0..self.k {
            self.beta[i] = match self.state[i] {
                BoundState::Free => 0.5,
                s => s.value(),
            };
        }
        self.active_set_iterations(h, g)?;
        Ok(&self.beta)
    }

    fn active_set_iterations(
        &mut self,
        h: &DMatrix<f64>,
        g: &DVector<f64>,
    ) -> Result<(), SlotError> {
        let max_iter = 25 * self.k + 25;
        for _ in 0..max_iter {
            // solve the equality-constrained problem on the free set
            let free: Vec<usize> = (0..self.k)
                .filter(|&i| self.state[i] == BoundState::Free)
                .collect();
            let nf = free.len();
            let mut target = DVector::zeros(self.k);
            if nf > 0 {
                let mut reduced = self.reduced.view_mut((0, 0), (nf, nf));
                for (a, &i) in free.iter().enumerate() {
                    for (b, &j) in free.iter().enumerate() {
                        reduced[(a, b)] = h[(i, j)];
                    }
                }
                for (a, &i) in free.iter().enumerate() {
                    let mut rhs = g[i];
                    for j in 0..self.k {
                        if self.state[j] != BoundState::Free {
                            rhs -= h[(i, j)] * self.state[j].value();
                        }
                    }
                    self.rhs[a] = rhs;
                }
                let sub = self.reduced.view((0, 0), (nf, nf)).clone_owned();
                let chol = Cholesky::new(sub).ok_or(SlotError::IllPosed)?;
                let sol = chol.solve(&self.rhs.rows(0, nf).clone_owned());
                for (a, &i) in free.iter().enumerate() {
                    target[i] = sol[a];
                }
            }
            for i in 0..self.k {
                if self.state[i] != BoundState::Free {
                    target[i] = self.state[i].value();
                }
            }

            // ratio test along beta -> target for the free variables
            let mut alpha = 1.0f64;
            let mut blocker: Option<(usize, BoundState)> = None;
            for &i in &free {
                let step = target[i] - self.beta[i];
                if step > BOUND_TOL && target[i] > 1.0 + BOUND_TOL {
                    let a = (1.0 - self.beta[i]) / step;
                    if a < alpha {
                        alpha = a;
                        blocker = Some((i, BoundState::Upper));
                    }
                } else if step < -BOUND_TOL && target[i] < -BOUND_TOL {
                    let a = (0.0 - self.beta[i]) / step;
                    if a < alpha {
                        alpha = a;
                        blocker = Some((i, BoundState::Lower));
                    }
                }
            }

            if let Some((i, bound)) = blocker {
                for &f in &free {
                    self.beta[f] += alpha * (target[f] - self.beta[f]);
                }
                self.beta[i] = bound.value();
                self.state[i] = bound;
                continue;
            }

            // full step accepted; check KKT multipliers on the active set
            self.beta.copy_from(&target);
            let grad = h * &self.beta - g;
            let mut worst: Option<(usize, f64)> = None;
            for i in 0..self.k {
                let violation = match self.state[i] {
                    BoundState::Lower => -grad[i],
                    BoundState::Upper => grad[i],
                    BoundState::Free => continue,
                };
                if violation > 1e-10 && worst.map_or(true, |(_, v)| violation > v) {
                    worst = Some((i, violation));
                }
            }
            match worst {
                Some((i, _)) => {
                    self.state[i] = BoundState::Free;
                }
                None => return Ok(()),
            }
        }
        Err(SlotError::NumericalFailure(
            "active-set iteration limit exceeded".into(),
        ))
    }
}

/// Projected-gradient norm of the β subproblem at `beta` (KKT residual).
pub fn projected_gradient_norm(h: &DMatrix<f64>, g: &DVector<f64>, beta: &DVector<f64>) -> f64 {
    let grad = h * beta - g;
    let mut sum = 0.0;
    for i in 0..beta.len() {
        let gi = grad[i];
        let active_low = beta[i] <= BOUND_TOL && gi > 0.0;
        let active_high = beta[i] >= 1.0 - BOUND_TOL && gi < 0.0;
        if !(active_low || active_high) {
            sum += gi * gi;
        }
    }
    sum.sqrt()
}

/// `M_ν = X_ν(V) + (B_ν(T) − X_ν(V))·Φ(ν)β` on the ambient grid.
pub fn model_spectrum(
    temperature: f64,
    view_factor: f64,
    beta: &[f64],
    ambient: &AmbientSpectra,
    basis: &SplineBasis,
) -> Result<Vec<f64>, SlotError> {
    let mut out = Vec::with_capacity(ambient.len());
    for (band, &nu) in ambient.grid().values().iter().enumerate() {
        let e = basis.eval(beta, nu)?;
        let x = view_factor * ambient.sky()[band] + (1.0 - view_factor) * ambient.ground()[band];
        out.push(x + (planck_band(temperature, nu) - x) * e);
    }
    Ok(out)
}

/// Public β-subproblem entry: solves at fixed `(T, V)` and reports the fit.
pub fn solve_beta_subproblem(
    temperature: f64,
    view_factor: f64,
    spectrum: &[f64],
    ambient: &AmbientSpectra,
    config: &SlotConfig,
) -> Result<BetaFit, SlotError> {
    if spectrum.len() != ambient.len() {
        return Err(SlotError::GridMismatch);
    }
    let ctx = SolverContext::new(ambient, config.clone())?;
    let mut ws = Workspace::new(ctx.bands(), ctx.coeff_count());
    ws.set_temperature(temperature, &ctx);
    beta_subproblem(&ctx, &mut ws, spectrum, view_factor)
}

/// Analytic `∂J/∂T` at fixed `(V, β)`:
/// `Σ w_ν (M_ν−S_ν)·e_ν·∂B/∂T(ν)`.
pub fn objective_temperature_gradient(
    temperature: f64,
    view_factor: f64,
    beta: &[f64],
    spectrum: &[f64],
    ambient: &AmbientSpectra,
    basis: &SplineBasis,
    weights: Option<&[f64]>,
) -> Result<f64, SlotError> {
    let mut grad = 0.0;
    for (band, &nu) in ambient.grid().values().iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[band]);
        let e = basis.eval(beta, nu)?;
        let x = view_factor * ambient.sky()[band] + (1.0 - view_factor) * ambient.ground()[band];
        let m = x + (planck_band(temperature, nu) - x) * e;
        grad += w * (m - spectrum[band]) * e * planck_band_dt(temperature, nu);
    }
    Ok(grad)
}

const GOLDEN_RATIO_STEP: f64 = 2.0 - 1.618_033_988_749_895;
const GOLDEN_ITERS: usize = 16;

/// Golden-section minimization of `f` on `[a, b]`; returns `(x_min, f_min)`.
fn golden_min(mut f: impl FnMut(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
    let mut x1 = a + GOLDEN_RATIO_STEP * (b - a);
    let mut x2 = b - GOLDEN_RATIO_STEP * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..GOLDEN_ITERS {
        if f1 < f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = a + GOLDEN_RATIO_STEP * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = b - GOLDEN_RATIO_STEP * (b - a);
            f2 = f(x2);
        }
    }
    if f1 < f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Resolved per-pixel temperature search range.
fn pixel_t_range(spectrum: &[f64], ctx: &SolverContext) -> (f64, f64) {
    if let Some(range) = ctx.config.t_range {
        return range;
    }
    let mut best_band = 0;
    let mut best_val = f64::MIN;
    for (i, &s) in spectrum.iter().enumerate() {
        if s > best_val {
            best_val = s;
            best_band = i;
        }
    }
    let nus = ctx.ambient.grid().values();
    match brightness_temperature(best_val, nus[best_band]) {
        Ok(bt) => ((bt - ctx.config.t_margin).max(1.0), bt + ctx.config.t_margin),
        // all-nonpositive spectrum: fall back to a broad physical range
        Err(_) => (200.0, 400.0),
    }
}

/// Full per-pixel solve: coarse `(T, V)` grid, then golden-section
/// coordinate descent with shrinking brackets.
pub fn outer_search(
    spectrum: &[f64],
    ambient: &AmbientSpectra,
    config: &SlotConfig,
) -> Result<PixelSolution, SlotError> {
    let ctx = SolverContext::new(ambient, config.clone())?;
    outer_search_with_context(spectrum, &ctx)
}

pub fn outer_search_with_context(
    spectrum: &[f64],
    ctx: &SolverContext,
) -> Result<PixelSolution, SlotError> {
    if spectrum.len() != ctx.bands() {
        return Err(SlotError::GridMismatch);
    }
    let mut ws = Workspace::new(ctx.bands(), ctx.coeff_count());
    let (t_lo, t_hi) = pixel_t_range(spectrum, ctx);
    let t_steps = ((t_hi - t_lo) / ctx.config.t_step + 1e-9).floor() as usize;
    let v_steps = (1.0 / ctx.config.v_step + 1e-9).floor() as usize;
    if t_steps == 0 && t_hi < t_lo {
        return Err(SlotError::Config("empty temperature search grid".into()));
    }

    // coarse grid; ties break toward smaller T, then smaller V
    let mut best: Option<(f64, f64, f64)> = None; // (J, T, V)
    for ti in 0..=t_steps {
        let t = t_lo + ti as f64 * ctx.config.t_step;
        ws.set_temperature(t, ctx);
        for vi in 0..=v_steps {
            let v = (vi as f64 * ctx.config.v_step).min(1.0);
            let fit = beta_subproblem(ctx, &mut ws, spectrum, v)?;
            let better = match best {
                None => true,
                Some((bj, _, _)) => fit.objective < bj,
            };
            if better {
                best = Some((fit.objective, t, v));
            }
        }
    }
    let (mut j_best, mut t_best, mut v_best) =
        best.ok_or_else(|| SlotError::Config("empty search grid".into()))?;

    // local refinement
    let tol = (ctx.config.refine_tol_factor * j_best).max(f64::MIN_POSITIVE);
    let mut t_radius = ctx.config.t_step;
    let mut v_radius = ctx.config.v_step;
    let mut trace = Vec::with_capacity(ctx.config.max_refine_sweeps + 1);
    trace.push(j_best);
    let mut sweeps = 0;
    for _ in 0..ctx.config.max_refine_sweeps {
        let j_before = j_best;
        let (a, b) = ((t_best - t_radius).max(t_lo), (t_best + t_radius).min(t_hi));
        let (t_new, j_t) = golden_min(
            |t| {
                ws.set_temperature(t, ctx);
                beta_subproblem(ctx, &mut ws, spectrum, v_best)
                    .map(|f| f.objective)
                    .unwrap_or(f64::INFINITY)
            },
            a,
            b,
        );
        if j_t < j_best {
            t_best = t_new;
            j_best = j_t;
        }
        ws.set_temperature(t_best, ctx);
        let (a, b) = ((v_best - v_radius).max(0.0), (v_best + v_radius).min(1.0));
        let (v_new, j_v) = golden_min(
            |v| {
                beta_subproblem(ctx, &mut ws, spectrum, v)
                    .map(|f| f.objective)
                    .unwrap_or(f64::INFINITY)
            },
            a,
            b,
        );
        if j_v < j_best {
            v_best = v_new;
            j_best = j_v;
        }
        t_radius *= 0.5;
        v_radius *= 0.5;
        sweeps += 1;
        trace.push(j_best);
        if j_before - j_best < tol {
            break;
        }
    }

    // final fit at the refined optimum
    ws.set_temperature(t_best, ctx);
    let fit = beta_subproblem(ctx, &mut ws, spectrum, v_best)?;

    // V-sensitivity: relative leverage of V on the model at the solution
    let mut sens_num = 0.0;
    let mut sens_den = 0.0;
    for (band, &nu) in ctx.ambient.grid().values().iter().enumerate() {
        let w = ctx.weights[band];
        let (start, vals) = ctx.phi_rows[band];
        let mut e = 0.0;
        for a in 0..4 {
            e += vals[a] * fit.beta[start + a];
        }
        let _ = nu;
        let delta = ctx.ambient.sky()[band] - ctx.ambient.ground()[band];
        sens_num += w * ((1.0 - e) * delta).powi(2);
        sens_den += w * spectrum[band] * spectrum[band];
    }
    let v_sensitivity = if sens_den > 0.0 { sens_num / sens_den } else { 0.0 };

    Ok(PixelSolution {
        temperature: t_best,
        view_factor: v_best,
        beta: fit.beta.as_slice().to_vec(),
        objective: fit.objective,
        residual_norm: fit.residual_sq.sqrt(),
        penalty_norm: fit.penalty_sq.sqrt(),
        refine_sweeps: sweeps,
        active_bounds: fit.active_bounds,
        v_sensitivity,
        v_identifiable: v_sensitivity >= ctx.config.v_sensitivity_threshold,
        objective_trace: trace,
    })
}

/// Decomposes every pixel of a cube. Pixels are independent, so the map is
/// data-parallel; output is identical for any thread count.
pub fn decompose_cube(
    cube: &HyperCube,
    ambient: &AmbientSpectra,
    config: &SlotConfig,
) -> Result<TexResult, SlotError> {
    if cube.grid() != ambient.grid() {
        return Err(SlotError::GridMismatch);
    }
    let ctx = SolverContext::new(ambient, config.clone())?;
    let pixels = cube.pixels();
    let solutions: Result<Vec<PixelSolution>, SlotError> = (0..pixels)
        .into_par_iter()
        .map(|pix| outer_search_with_context(&cube.pixel_spectrum(pix), &ctx))
        .collect();
    let solutions = solutions?;

    let k = config.basis_coeffs;
    let mut result = TexResult {
        width: cube.width(),
        height: cube.height(),
        coeff_count: k,
        temperature: Vec::with_capacity(pixels),
        view_factor: Vec::with_capacity(pixels),
        beta: Vec::with_capacity(pixels * k),
        residual_norm: Vec::with_capacity(pixels),
        objective: Vec::with_capacity(pixels),
        active_bounds: Vec::with_capacity(pixels),
        v_identifiable: Vec::with_capacity(pixels),
        config: config.clone(),
    };
    for sol in solutions {
        result.temperature.push(sol.temperature);
        result.view_factor.push(sol.view_factor);
        result.beta.extend_from_slice(&sol.beta);
        result.residual_norm.push(sol.residual_norm);
        result.objective.push(sol.objective);
        result.active_bounds.push(sol.active_bounds as u16);
        result.v_identifiable.push(sol.v_identifiable);
    }
    Ok(result)
}

/// Runs [`decompose_cube`] once per λ value.
pub fn lambda_sweep(
    cube: &HyperCube,
    ambient: &AmbientSpectra,
    config: &SlotConfig,
    lambdas: &[f64],
) -> Result<Vec<TexResult>, SlotError> {
    lambdas
        .iter()
        .map(|&lambda| {
            let mut cfg = config.clone();
            cfg.lambda = lambda;
            decompose_cube(cube, ambient, &cfg)
        })
        .collect()
}
