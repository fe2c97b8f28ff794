//! Forward thermal rendering, TeX-degeneracy counterfactuals, synthetic
//! scenes, and noise injection.
//!
//! The rendering model is the two-source form
//!
//! ```text
//! S_ν = e_ν·B_ν(T) + (1 − e_ν)·X_ν,    X_ν = V·S_sky,ν + (1 − V)·S_g,ν
//! ```
//!
//! Kirchhoff reflectivity `r_ν = 1 − e_ν` is implicit. The synthetic scenes
//! here are the ground-truth oracle for every solver test: temperature is a
//! smooth blob field, the view factor comes from a ramp/hemisphere
//! orientation map, and per-region emissivity is a base spline curve plus a
//! smooth spatial perturbation of amplitude `sigma_intra`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bspline::{BsplineError, SplineBasis};
use crate::spectral::{planck_band, planck_radiance, SpectralError, SpectralGrid};

#[derive(Debug, Error)]
pub enum ForwardError {
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Bspline(#[from] BsplineError),
    #[error("view factor {0} outside [0, 1]")]
    ViewFactorOutOfRange(f64),
    #[error("temperature {0} K is not positive")]
    NonPositiveTemperature(f64),
    #[error("emissivity {value} at band {band} outside [0, 1]")]
    EmissivityOutOfRange { band: usize, value: f64 },
    #[error("ambient spectra lengths differ: sky {sky}, ground {ground}")]
    AmbientLengthMismatch { sky: usize, ground: usize },
    #[error("spectral grids do not match")]
    GridMismatch,
    #[error("counterfactual denominator vanishes at band {band} (wavenumber {wavenumber} cm-1)")]
    SingularCounterfactual { band: usize, wavenumber: f64 },
    #[error("scene spec invalid: {0}")]
    SceneSpec(String),
    #[error("emissivity clipping hit {got:.1}% of pixels (limit {limit:.0}%): perturbation too large")]
    ClippingExceeded { got: f64, limit: f64 },
}

/// Sky- and ground-looking ambient radiance on a shared grid — the two
/// texture sources.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbientSpectra {
    grid: SpectralGrid,
    sky: Vec<f64>,
    ground: Vec<f64>,
}

impl AmbientSpectra {
    /// Wraps measured sky/ground spectra. Warns (but does not fail) when the
    /// two coincide in every band, because then `V` is unidentifiable.
    pub fn new(
        grid: SpectralGrid,
        sky: Vec<f64>,
        ground: Vec<f64>,
    ) -> Result<Self, ForwardError> {
        if sky.len() != ground.len() {
            return Err(ForwardError::AmbientLengthMismatch {
                sky: sky.len(),
                ground: ground.len(),
            });
        }
        if sky.len() != grid.len() {
            return Err(ForwardError::Spectral(SpectralError::LengthMismatch {
                expected: grid.len(),
                got: sky.len(),
            }));
        }
        let out = Self { grid, sky, ground };
        if out.is_degenerate() {
            log::warn!("ambient sky and ground spectra are identical: V is unidentifiable");
        }
        Ok(out)
    }

    /// Smooth graybody fixture: `S_sky = 0.98·B(t_sky)` and
    /// `S_g = 0.95·B(t_ground) + 0.05·S_sky`.
    pub fn graybody(
        t_sky: f64,
        t_ground: f64,
        grid: &SpectralGrid,
    ) -> Result<Self, ForwardError> {
        let bsky = planck_radiance(t_sky, grid)?;
        let bg = planck_radiance(t_ground, grid)?;
        let sky: Vec<f64> = bsky.values().iter().map(|&b| 0.98 * b).collect();
        let ground: Vec<f64> = bg
            .values()
            .iter()
            .zip(&sky)
            .map(|(&b, &s)| 0.95 * b + 0.05 * s)
            .collect();
        Self::new(grid.clone(), sky, ground)
    }

    /// Realistic LWIR downwelling fixture: opaque warm band edges, the ozone
    /// feature near 1042 cm⁻¹, a cold window between, and narrow
    /// water-vapor-like emission lines. The line comb is deterministic in
    /// `seed`; `line_strength` scales the line amplitudes.
    ///
    /// The spectral fine structure matters: it is what pins the view factor
    /// of a smooth-emissivity surface during decomposition.
    pub fn structured_sky(
        t_air: f64,
        t_ground: f64,
        line_strength: f64,
        seed: u64,
        grid: &SpectralGrid,
    ) -> Result<Self, ForwardError> {
        if !(t_air > 0.0) {
            return Err(ForwardError::NonPositiveTemperature(t_air));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nline = 60;
        let lines: Vec<(f64, f64, f64)> = (0..nline)
            .map(|_| {
                let c = rng.gen_range(875.0..1262.0);
                let w = rng.gen_range(3.0..9.0);
                let a = rng.gen_range(0.2..1.0) * line_strength;
                (c, w, a)
            })
            .collect();
        let gauss = |nu: f64, c: f64, w: f64| (-((nu - c) / w).powi(2)).exp();
        let sky: Vec<f64> = grid
            .values()
            .iter()
            .map(|&nu| {
                let mut eps = 0.18
                    + 0.97 * gauss(nu, 870.0, 26.0)
                    + 0.85 * gauss(nu, 1042.0, 24.0)
                    + 0.97 * gauss(nu, 1266.0, 30.0);
                for &(c, w, a) in &lines {
                    eps += a * gauss(nu, c, w);
                }
                eps.clamp(0.02, 1.0) * planck_band(t_air, nu)
            })
            .collect();
        let bg = planck_radiance(t_ground, grid)?;
        let ground: Vec<f64> = bg
            .values()
            .iter()
            .zip(&sky)
            .map(|(&b, &s)| 0.95 * b + 0.05 * s)
            .collect();
        Self::new(grid.clone(), sky, ground)
    }

    pub fn grid(&self) -> &SpectralGrid {
        &self.grid
    }

    pub fn sky(&self) -> &[f64] {
        &self.sky
    }

    pub fn ground(&self) -> &[f64] {
        &self.ground
    }

    pub fn len(&self) -> usize {
        self.sky.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sky.is_empty()
    }

    /// True when sky and ground coincide in every band.
    pub fn is_degenerate(&self) -> bool {
        self.sky
            .iter()
            .zip(&self.ground)
            .all(|(s, g)| (s - g).abs() == 0.0)
    }

    /// Bandwise `S_sky − S_g`.
    pub fn contrast(&self) -> Vec<f64> {
        self.sky
            .iter()
            .zip(&self.ground)
            .map(|(s, g)| s - g)
            .collect()
    }
}

/// Ground-truth attributes of one pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelTruth {
    pub temperature: f64,
    /// Bandwise emissivity. The closed endpoints 0 and 1 are permitted here
    /// (forward oracle only); the solver enforces the open interval.
    pub emissivity: Vec<f64>,
    pub view_factor: f64,
}

impl PixelTruth {
    pub fn new(
        temperature: f64,
        emissivity: Vec<f64>,
        view_factor: f64,
    ) -> Result<Self, ForwardError> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(ForwardError::NonPositiveTemperature(temperature));
        }
        if !(0.0..=1.0).contains(&view_factor) {
            return Err(ForwardError::ViewFactorOutOfRange(view_factor));
        }
        for (band, &e) in emissivity.iter().enumerate() {
            if !(0.0..=1.0).contains(&e) || !e.is_finite() {
                return Err(ForwardError::EmissivityOutOfRange { band, value: e });
            }
        }
        Ok(Self {
            temperature,
            emissivity,
            view_factor,
        })
    }
}

/// `X_ν = V·S_sky,ν + (1−V)·S_g,ν`.
pub fn texture_radiance(
    view_factor: f64,
    ambient: &AmbientSpectra,
) -> Result<Vec<f64>, ForwardError> {
    if !(0.0..=1.0).contains(&view_factor) {
        return Err(ForwardError::ViewFactorOutOfRange(view_factor));
    }
    Ok(ambient
        .sky
        .iter()
        .zip(&ambient.ground)
        .map(|(&s, &g)| view_factor * s + (1.0 - view_factor) * g)
        .collect())
}

/// Renders one pixel: `S_ν = e_ν·B_ν(T) + (1−e_ν)·X_ν`.
pub fn render_pixel(
    truth: &PixelTruth,
    ambient: &AmbientSpectra,
) -> Result<Vec<f64>, ForwardError> {
    if truth.emissivity.len() != ambient.len() {
        return Err(ForwardError::GridMismatch);
    }
    let x = texture_radiance(truth.view_factor, ambient)?;
    Ok(ambient
        .grid
        .values()
        .iter()
        .zip(truth.emissivity.iter().zip(&x))
        .map(|(&nu, (&e, &xv))| e * planck_band(truth.temperature, nu) + (1.0 - e) * xv)
        .collect())
}

/// The emissivity `e'` that renders identically to `truth` under the shifted
/// status `(T', V')`:
///
/// ```text
/// e'_ν = e_ν·(B_ν(T)−S_g−V·Δ)/(B_ν(T')−S_g−V'·Δ) + (V−V')·Δ/(B_ν(T')−S_g−V'·Δ)
/// ```
///
/// with `Δ = S_sky − S_g`. Returns the curve and whether it is admissible
/// (`0 < e'_ν < 1` at every band). A vanishing denominator at any band is an
/// error naming that band.
pub fn counterfactual_emissivity(
    truth: &PixelTruth,
    t_new: f64,
    v_new: f64,
    ambient: &AmbientSpectra,
) -> Result<(Vec<f64>, bool), ForwardError> {
    if !(t_new > 0.0) || !t_new.is_finite() {
        return Err(ForwardError::NonPositiveTemperature(t_new));
    }
    if !(0.0..=1.0).contains(&v_new) {
        return Err(ForwardError::ViewFactorOutOfRange(v_new));
    }
    if truth.emissivity.len() != ambient.len() {
        return Err(ForwardError::GridMismatch);
    }
    let nus = ambient.grid.values();
    let mut out = Vec::with_capacity(ambient.len());
    let mut admissible = true;
    for band in 0..ambient.len() {
        let nu = nus[band];
        let delta = ambient.sky[band] - ambient.ground[band];
        let num = planck_band(truth.temperature, nu)
            - ambient.ground[band]
            - truth.view_factor * delta;
        let den = planck_band(t_new, nu) - ambient.ground[band] - v_new * delta;
        let scale = planck_band(t_new, nu).abs() + ambient.ground[band].abs() + delta.abs();
        if den.abs() <= 1e-12 * scale {
            return Err(ForwardError::SingularCounterfactual {
                band,
                wavenumber: nu,
            });
        }
        let e_new = truth.emissivity[band] * num / den
            + (truth.view_factor - v_new) * delta / den;
        if !(e_new > 0.0 && e_new < 1.0) {
            admissible = false;
        }
        out.push(e_new);
    }
    Ok((out, admissible))
}

/// How the base emissivity of a region is described.
///
/// `Ramp` places the spline coefficients on
/// `offset + slope·u + bow·4(u−1/2)²` with `u = k/(K−1)`; `Beta` gives the
/// coefficients directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EmissivityBase {
    Ramp { offset: f64, slope: f64, #[serde(default)] bow: f64 },
    Beta { beta: Vec<f64> },
}

impl EmissivityBase {
    pub fn coefficients(&self, coeff_count: usize) -> Result<Vec<f64>, ForwardError> {
        match self {
            EmissivityBase::Ramp { offset, slope, bow } => Ok((0..coeff_count)
                .map(|k| {
                    let u = k as f64 / (coeff_count - 1) as f64;
                    offset + slope * u + bow * 4.0 * (u - 0.5) * (u - 0.5)
                })
                .collect()),
            EmissivityBase::Beta { beta } => {
                if beta.len() != coeff_count {
                    return Err(ForwardError::SceneSpec(format!(
                        "region beta length {} does not match basis_coeffs {}",
                        beta.len(),
                        coeff_count
                    )));
                }
                Ok(beta.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub name: String,
    pub base: EmissivityBase,
}

/// How regions tile the scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegionLayout {
    /// Vertical strips of equal width, one per region.
    #[default]
    Columns,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl Default for BandSpec {
    fn default() -> Self {
        Self {
            min: 870.0,
            max: 1269.0,
            step: 6.0,
        }
    }
}

fn default_t_range() -> Range {
    Range {
        min: 295.0,
        max: 310.0,
    }
}

fn default_v_range() -> Range {
    Range {
        min: 0.06,
        max: 0.94,
    }
}

fn default_basis_coeffs() -> usize {
    12
}

/// Declarative description of a synthetic scene; JSON-serializable for the
/// CLI and test fixtures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    #[serde(default)]
    pub band: BandSpec,
    #[serde(default = "default_basis_coeffs")]
    pub basis_coeffs: usize,
    #[serde(default = "default_t_range")]
    pub temperature: Range,
    #[serde(default = "default_v_range")]
    pub view_factor: Range,
    /// Amplitude of the smooth spatial emissivity perturbation.
    #[serde(default)]
    pub sigma_intra: f64,
    pub regions: Vec<RegionSpec>,
    #[serde(default)]
    pub layout: RegionLayout,
}

/// A generated ground-truth scene: per-pixel `{T, β, V}` plus region labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub grid: SpectralGrid,
    pub basis: SplineBasis,
    /// Row-major `height × width`.
    pub temperature: Vec<f64>,
    pub view_factor: Vec<f64>,
    /// Pixel-major `height × width × K`.
    pub beta: Vec<f64>,
    pub region: Vec<u16>,
    /// Fraction of pixels whose coefficients hit the clip bounds.
    pub clipped_fraction: f64,
}

impl SyntheticScene {
    pub fn pixels(&self) -> usize {
        self.spec.width * self.spec.height
    }

    pub fn beta_at(&self, pixel: usize) -> &[f64] {
        let k = self.basis.coeff_count();
        &self.beta[pixel * k..(pixel + 1) * k]
    }

    /// Bandwise emissivity of one pixel on the scene grid.
    pub fn emissivity_at(&self, pixel: usize) -> Result<Vec<f64>, ForwardError> {
        let beta = self.beta_at(pixel);
        self.grid
            .values()
            .iter()
            .map(|&nu| self.basis.eval(beta, nu).map_err(ForwardError::from))
            .collect()
    }

    pub fn truth_at(&self, pixel: usize) -> Result<PixelTruth, ForwardError> {
        PixelTruth::new(
            self.temperature[pixel],
            self.emissivity_at(pixel)?,
            self.view_factor[pixel],
        )
    }
}

/// Smooth random field in `[-1, 1]`: a sum of a few low-frequency sinusoids.
fn smooth_field(rng: &mut ChaCha8Rng, height: usize, width: usize, modes: usize, max_freq: u32) -> Vec<f64> {
    let mut field = vec![0.0; height * width];
    let mut total = 0.0;
    for _ in 0..modes {
        let p = rng.gen_range(1..=max_freq) as f64;
        let q = rng.gen_range(1..=max_freq) as f64;
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp: f64 = rng.gen_range(0.5..1.0);
        let sx: f64 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let sy: f64 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        total += amp;
        let wd = (width.max(2) - 1) as f64;
        let hd = (height.max(2) - 1) as f64;
        for r in 0..height {
            for c in 0..width {
                let xu = c as f64 / wd;
                let yu = r as f64 / hd;
                field[r * width + c] +=
                    amp * (std::f64::consts::TAU * (sx * p * xu + sy * q * yu) + phase).sin();
            }
        }
    }
    for v in &mut field {
        *v /= total;
    }
    field
}

/// Smooth temperature field: a few soft warm blobs over the base level.
fn temperature_field(rng: &mut ChaCha8Rng, height: usize, width: usize, range: Range) -> Vec<f64> {
    let mut field = vec![0.0; height * width];
    let min_dim = height.min(width) as f64;
    for _ in 0..3 {
        let cy = rng.gen_range(0.2..0.8) * height as f64;
        let cx = rng.gen_range(0.2..0.8) * width as f64;
        let sigma = rng.gen_range(0.13..0.22) * min_dim;
        let amp = rng.gen_range(0.75..1.0);
        for r in 0..height {
            for c in 0..width {
                let d2 = ((r as f64 - cy).powi(2) + (c as f64 - cx).powi(2)) / (2.0 * sigma * sigma);
                field[r * width + c] += amp * (-d2.powf(1.25)).exp();
            }
        }
    }
    let peak = field.iter().cloned().fold(f64::MIN, f64::max).max(1e-9);
    field
        .iter()
        .map(|&f| range.min + (range.max - range.min) * f / peak)
        .collect()
}

/// View-factor field from a synthetic orientation map: a left-right ramp, a
/// hemisphere bump tilted toward the sky, and a smooth ripple, rescaled into
/// the requested range.
fn view_factor_field(rng: &mut ChaCha8Rng, height: usize, width: usize, range: Range) -> Vec<f64> {
    let hd = height as f64;
    let wd = width as f64;
    let cy = (hd - 1.0) / 2.0;
    let cx = (wd - 1.0) / 2.0;
    let radius = 0.42 * hd.min(wd);
    let rip1 = smooth_field(rng, height, width, 4, 3);
    let rip2 = smooth_field(rng, height, width, 3, 4);
    let mut raw = vec![0.0; height * width];
    for r in 0..height {
        for c in 0..width {
            let idx = r * width + c;
            let xu = c as f64 / (wd - 1.0).max(1.0);
            let rr = ((r as f64 - cy).powi(2) + (c as f64 - cx).powi(2)).sqrt();
            let bump = if rr < radius {
                let nz = (1.0 - (rr / radius).powi(2)).sqrt();
                let ny = -(r as f64 - cy) / radius;
                (0.55 * nz + 0.45 * ny).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            raw[idx] = 0.45 * xu + 0.50 * bump + 0.35 * (rip1[idx] + 0.5 * rip2[idx]);
        }
    }
    let lo = raw.iter().cloned().fold(f64::MAX, f64::min);
    let hi = raw.iter().cloned().fold(f64::MIN, f64::max);
    let span = (hi - lo).max(1e-12);
    raw.iter()
        .map(|&v| range.min + (range.max - range.min) * (v - lo) / span)
        .collect()
}

/// Emissivity clip bound: coefficients stay in `(eps, 1−eps)`.
const CLIP_EPS: f64 = 1e-3;
/// A scene whose perturbation clips more pixels than this fraction is
/// rejected as over-perturbed.
const CLIP_LIMIT: f64 = 0.10;

/// Generates a ground-truth scene from its descriptor.
pub fn make_synthetic_scene(spec: &SceneSpec) -> Result<SyntheticScene, ForwardError> {
    if spec.width < 8 || spec.height < 8 {
        return Err(ForwardError::SceneSpec(format!(
            "scene dimensions must be at least 8x8, got {}x{}",
            spec.width, spec.height
        )));
    }
    if spec.regions.is_empty() {
        return Err(ForwardError::SceneSpec("at least one region required".into()));
    }
    if !(spec.sigma_intra >= 0.0) {
        return Err(ForwardError::SceneSpec(format!(
            "sigma_intra must be nonnegative, got {}",
            spec.sigma_intra
        )));
    }
    if !(spec.temperature.min > 0.0 && spec.temperature.min <= spec.temperature.max) {
        return Err(ForwardError::SceneSpec("invalid temperature range".into()));
    }
    if !(0.0 <= spec.view_factor.min
        && spec.view_factor.min <= spec.view_factor.max
        && spec.view_factor.max <= 1.0)
    {
        return Err(ForwardError::SceneSpec("invalid view-factor range".into()));
    }
    let grid = crate::spectral::wavenumber_grid(spec.band.min, spec.band.max, spec.band.step)?;
    let basis = SplineBasis::for_grid(&grid, spec.basis_coeffs)?;
    let k = basis.coeff_count();
    let (h, w) = (spec.height, spec.width);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let temperature = temperature_field(&mut rng, h, w, spec.temperature);
    let view_factor = view_factor_field(&mut rng, h, w, spec.view_factor);

    // region labels: vertical strips
    let nregion = spec.regions.len();
    let mut region = vec![0u16; h * w];
    for r in 0..h {
        for c in 0..w {
            let idx = (c * nregion / w).min(nregion - 1);
            region[r * w + c] = idx as u16;
        }
    }

    // per-region base curves (validated in (0,1)) plus affine-in-k spatial
    // perturbation fields; affine perturbations keep the coefficient
    // curvature of the truth at zero.
    let mut bases = Vec::with_capacity(nregion);
    for rspec in &spec.regions {
        let base = rspec.base.coefficients(k)?;
        for &b in &base {
            if !(b > 0.0 && b < 1.0) {
                return Err(ForwardError::SceneSpec(format!(
                    "region '{}' base coefficient {} outside (0, 1)",
                    rspec.name, b
                )));
            }
        }
        bases.push(base);
    }
    let mut offsets = Vec::with_capacity(nregion);
    let mut slopes = Vec::with_capacity(nregion);
    for _ in 0..nregion {
        offsets.push(smooth_field(&mut rng, h, w, 3, 2));
        slopes.push(smooth_field(&mut rng, h, w, 3, 2));
    }

    let mut beta = vec![0.0; h * w * k];
    let mut clipped_pixels = 0usize;
    for pix in 0..h * w {
        let rgn = region[pix] as usize;
        let base = &bases[rgn];
        let off = offsets[rgn][pix];
        let slo = slopes[rgn][pix];
        let mut clipped = false;
        for kk in 0..k {
            let u = kk as f64 / (k - 1) as f64;
            let mut v = base[kk] + spec.sigma_intra * (0.6 * off + 0.4 * slo * (2.0 * u - 1.0));
            if v < CLIP_EPS || v > 1.0 - CLIP_EPS {
                clipped = true;
                v = v.clamp(CLIP_EPS, 1.0 - CLIP_EPS);
            }
            beta[pix * k + kk] = v;
        }
        if clipped {
            clipped_pixels += 1;
        }
    }
    let clipped_fraction = clipped_pixels as f64 / (h * w) as f64;
    if clipped_fraction > CLIP_LIMIT {
        return Err(ForwardError::ClippingExceeded {
            got: clipped_fraction * 100.0,
            limit: CLIP_LIMIT * 100.0,
        });
    }

    Ok(SyntheticScene {
        spec: spec.clone(),
        grid,
        basis,
        temperature,
        view_factor,
        beta,
        region,
        clipped_fraction,
    })
}

/// Where a cube's samples came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Clean,
    Noisy { seed: u64, snr_db: f64 },
}

/// H×W×N radiance cube. Samples are stored as `f32` in band-sequential
/// order (all of band 0 row-major, then band 1, …), matching the on-disk
/// layout bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    width: usize,
    height: usize,
    grid: SpectralGrid,
    data: Vec<f32>,
    provenance: Provenance,
}

impl HyperCube {
    pub fn new(
        width: usize,
        height: usize,
        grid: SpectralGrid,
        data: Vec<f32>,
        provenance: Provenance,
    ) -> Result<Self, ForwardError> {
        if data.len() != width * height * grid.len() {
            return Err(ForwardError::Spectral(SpectralError::LengthMismatch {
                expected: width * height * grid.len(),
                got: data.len(),
            }));
        }
        if let Some(band) = data.iter().position(|v| !v.is_finite()) {
            return Err(ForwardError::Spectral(SpectralError::NonFiniteValue(band)));
        }
        Ok(Self {
            width,
            height,
            grid,
            data,
            provenance,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> usize {
        self.grid.len()
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn grid(&self) -> &SpectralGrid {
        &self.grid
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// One pixel's spectrum gathered across bands, widened to f64.
    pub fn pixel_spectrum(&self, pixel: usize) -> Vec<f64> {
        let hw = self.pixels();
        (0..self.bands())
            .map(|b| self.data[b * hw + pixel] as f64)
            .collect()
    }

    /// Whole-cube root mean square.
    pub fn rms(&self) -> f64 {
        let sum: f64 = self.data.iter().map(|&v| (v as f64) * (v as f64)).sum();
        (sum / self.data.len() as f64).sqrt()
    }

    /// Band-averaged image (row-major H×W), the "traditional IR" view.
    pub fn band_mean_image(&self) -> Vec<f64> {
        let hw = self.pixels();
        let mut out = vec![0.0; hw];
        for b in 0..self.bands() {
            let plane = &self.data[b * hw..(b + 1) * hw];
            for (o, &v) in out.iter_mut().zip(plane) {
                *o += v as f64;
            }
        }
        let n = self.bands() as f64;
        for o in &mut out {
            *o /= n;
        }
        out
    }
}

/// Renders a whole scene to a clean cube (per-pixel [`render_pixel`]).
pub fn render_scene(
    scene: &SyntheticScene,
    ambient: &AmbientSpectra,
) -> Result<HyperCube, ForwardError> {
    if scene.grid != *ambient.grid() {
        return Err(ForwardError::GridMismatch);
    }
    let n = scene.grid.len();
    let hw = scene.pixels();
    let phi = scene.basis.design_matrix(&scene.grid)?;
    let nus = scene.grid.values();
    let k = scene.basis.coeff_count();

    use rayon::prelude::*;
    let spectra: Vec<Vec<f64>> = (0..hw)
        .into_par_iter()
        .map(|pix| {
            let beta = scene.beta_at(pix);
            let t = scene.temperature[pix];
            let v = scene.view_factor[pix];
            (0..n)
                .map(|band| {
                    let mut e = 0.0;
                    for kk in 0..k {
                        let w = phi[(band, kk)];
                        if w != 0.0 {
                            e += w * beta[kk];
                        }
                    }
                    let x = v * ambient.sky[band] + (1.0 - v) * ambient.ground[band];
                    e * planck_band(t, nus[band]) + (1.0 - e) * x
                })
                .collect()
        })
        .collect();

    let mut data = vec![0.0f32; hw * n];
    for (pix, spec) in spectra.iter().enumerate() {
        for (band, &s) in spec.iter().enumerate() {
            data[band * hw + pix] = s as f32;
        }
    }
    HyperCube::new(scene.spec.width, scene.spec.height, scene.grid.clone(), data, Provenance::Clean)
}

/// Adds zero-mean Gaussian noise with `σ = rms(cube)/10^(snr_db/20)`.
///
/// Each sample's noise is drawn from a ChaCha stream keyed by
/// `(seed, sample index)`, so the result is independent of iteration order
/// and identical for any thread count. An infinite `snr_db` is the identity.
pub fn add_noise(cube: &HyperCube, snr_db: f64, seed: u64) -> HyperCube {
    if snr_db.is_infinite() && snr_db > 0.0 {
        return cube.clone();
    }
    let sigma = cube.rms() / 10f64.powf(snr_db / 20.0);
    use rayon::prelude::*;
    let data: Vec<f32> = cube
        .data
        .par_iter()
        .enumerate()
        .map(|(idx, &v)| {
            let mut key = [0u8; 32];
            key[..8].copy_from_slice(&seed.to_le_bytes());
            key[8..16].copy_from_slice(&(idx as u64).to_le_bytes());
            let mut rng = ChaCha8Rng::from_seed(key);
            let z: f64 = StandardNormal.sample(&mut rng);
            (v as f64 + sigma * z) as f32
        })
        .collect();
    HyperCube {
        width: cube.width,
        height: cube.height,
        grid: cube.grid.clone(),
        data,
        provenance: Provenance::Noisy { seed, snr_db },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::wavenumber_grid;
    use approx::assert_relative_eq;

    fn test_grid() -> SpectralGrid {
        wavenumber_grid(870.0, 1269.0, 6.0).unwrap()
    }

    fn test_ambient() -> AmbientSpectra {
        AmbientSpectra::graybody(260.0, 290.0, &test_grid()).unwrap()
    }

    fn uniform_truth(t: f64, e: f64, v: f64, n: usize) -> PixelTruth {
        PixelTruth::new(t, vec![e; n], v).unwrap()
    }

    #[test]
    fn texture_endpoints() {
        let amb = test_ambient();
        let x0 = texture_radiance(0.0, &amb).unwrap();
        assert_eq!(x0, amb.ground().to_vec());
        let x1 = texture_radiance(1.0, &amb).unwrap();
        assert_eq!(x1, amb.sky().to_vec());
        let xm = texture_radiance(0.5, &amb).unwrap();
        for ((m, s), g) in xm.iter().zip(amb.sky()).zip(amb.ground()) {
            assert_relative_eq!(*m, 0.5 * (s + g), max_relative = 1e-14);
        }
        assert!(texture_radiance(1.5, &amb).is_err());
    }

    #[test]
    fn blackbody_and_mirror_limits() {
        let amb = test_ambient();
        let n = amb.len();
        let bb = render_pixel(&uniform_truth(300.0, 1.0, 0.3, n), &amb).unwrap();
        let bb2 = render_pixel(&uniform_truth(300.0, 1.0, 0.9, n), &amb).unwrap();
        for (i, &nu) in amb.grid().values().iter().enumerate() {
            assert_relative_eq!(bb[i], planck_band(300.0, nu), max_relative = 1e-14);
            assert_eq!(bb[i], bb2[i]);
        }
        let mirror = render_pixel(&uniform_truth(300.0, 0.0, 0.4, n), &amb).unwrap();
        let mirror_cold = render_pixel(&uniform_truth(250.0, 0.0, 0.4, n), &amb).unwrap();
        let x = texture_radiance(0.4, &amb).unwrap();
        for i in 0..n {
            assert_relative_eq!(mirror[i], x[i], max_relative = 1e-14);
            assert_eq!(mirror[i], mirror_cold[i]);
        }
    }

    #[test]
    fn render_matches_arithmetic_composition() {
        let amb = test_ambient();
        let n = amb.len();
        let s = render_pixel(&uniform_truth(300.0, 0.95, 0.3, n), &amb).unwrap();
        for (i, &nu) in amb.grid().values().iter().enumerate() {
            let x = 0.3 * amb.sky()[i] + 0.7 * amb.ground()[i];
            let expect = 0.95 * planck_band(300.0, nu) + 0.05 * x;
            assert_relative_eq!(s[i], expect, max_relative = 1e-14);
        }
    }

    #[test]
    fn render_affine_in_emissivity() {
        let amb = test_ambient();
        let n = amb.len();
        let s0 = render_pixel(&uniform_truth(305.0, 0.2, 0.6, n), &amb).unwrap();
        let s1 = render_pixel(&uniform_truth(305.0, 0.8, 0.6, n), &amb).unwrap();
        let sm = render_pixel(&uniform_truth(305.0, 0.5, 0.6, n), &amb).unwrap();
        for i in 0..n {
            assert_relative_eq!(sm[i], 0.5 * (s0[i] + s1[i]), max_relative = 1e-12);
        }
    }

    #[test]
    fn render_monotone_in_temperature() {
        let amb = test_ambient();
        let n = amb.len();
        let lo = render_pixel(&uniform_truth(300.0, 0.7, 0.5, n), &amb).unwrap();
        let hi = render_pixel(&uniform_truth(301.0, 0.7, 0.5, n), &amb).unwrap();
        for i in 0..n {
            assert!(hi[i] > lo[i]);
        }
    }

    #[test]
    fn identity_counterfactual_returns_truth() {
        let amb = test_ambient();
        let truth = uniform_truth(300.0, 0.9, 0.4, amb.len());
        let (e, adm) = counterfactual_emissivity(&truth, 300.0, 0.4, &amb).unwrap();
        assert!(adm);
        for (a, b) in e.iter().zip(&truth.emissivity) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn counterfactual_renders_identically() {
        use rand::{Rng, SeedableRng};
        let amb = test_ambient();
        let n = amb.len();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut checked = 0;
        while checked < 200 {
            let t = rng.gen_range(280.0..320.0);
            let e: f64 = rng.gen_range(0.3..0.98);
            let v = rng.gen_range(0.0..1.0);
            let truth = uniform_truth(t, e, v, n);
            let t2 = rng.gen_range(285.0..325.0);
            let v2 = rng.gen_range(0.0..1.0);
            let Ok((e2, adm)) = counterfactual_emissivity(&truth, t2, v2, &amb) else {
                continue;
            };
            if !adm {
                continue;
            }
            let s1 = render_pixel(&truth, &amb).unwrap();
            let s2 = render_pixel(&PixelTruth::new(t2, e2, v2).unwrap(), &amb).unwrap();
            for i in 0..n {
                assert!(
                    (s1[i] - s2[i]).abs() <= 1e-10 * s1[i].abs(),
                    "band {i}: {} vs {}",
                    s1[i],
                    s2[i]
                );
            }
            checked += 1;
        }
    }

    #[test]
    fn hot_counterfactual_eventually_inadmissible() {
        let amb = test_ambient();
        let truth = uniform_truth(300.0, 0.9, 0.4, amb.len());
        let mut found = false;
        let mut t2 = 300.0;
        while t2 < 400.0 {
            t2 += 5.0;
            let (_, adm) = counterfactual_emissivity(&truth, t2, 0.4, &amb).unwrap();
            if !adm {
                found = true;
                break;
            }
        }
        assert!(found, "no inadmissible counterfactual up to 400 K");
    }

    fn small_spec(sigma: f64) -> SceneSpec {
        SceneSpec {
            width: 12,
            height: 10,
            seed: 7,
            band: BandSpec::default(),
            basis_coeffs: 12,
            temperature: Range { min: 296.0, max: 308.0 },
            view_factor: Range { min: 0.06, max: 0.94 },
            sigma_intra: sigma,
            regions: vec![RegionSpec {
                name: "a".into(),
                base: EmissivityBase::Ramp { offset: 0.07, slope: 0.86, bow: 0.0 },
            }],
            layout: RegionLayout::Columns,
        }
    }

    #[test]
    fn zero_sigma_scene_shares_base_beta() {
        let scene = make_synthetic_scene(&small_spec(0.0)).unwrap();
        let k = scene.basis.coeff_count();
        let base = scene.beta_at(0).to_vec();
        for pix in 1..scene.pixels() {
            assert_eq!(scene.beta_at(pix), &base[..]);
        }
        assert_eq!(base.len(), k);
        assert_eq!(scene.clipped_fraction, 0.0);
    }

    #[test]
    fn scene_regimes_measure_contrast_and_spread() {
        // two-region scene: uniform regime has contrast >> intra spread
        let mut spec = small_spec(0.02);
        spec.regions.push(RegionSpec {
            name: "b".into(),
            base: EmissivityBase::Ramp { offset: 0.17, slope: 0.86, bow: 0.0 },
        });
        let scene = make_synthetic_scene(&spec).unwrap();
        // bandwise contrast between region base curves is the offset 0.10
        let e_left = scene.emissivity_at(0).unwrap();
        let e_right = scene.emissivity_at(scene.spec.width - 1).unwrap();
        let contrast = e_left
            .iter()
            .zip(&e_right)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!((contrast - 0.10).abs() < 0.05);
        // boundary regime reverses the ordering
        let mut bspec = spec.clone();
        bspec.sigma_intra = 0.10;
        bspec.regions[1] = RegionSpec {
            name: "b".into(),
            base: EmissivityBase::Ramp { offset: 0.09, slope: 0.86, bow: 0.0 },
        };
        let bscene = make_synthetic_scene(&bspec).unwrap();
        let mut spread = 0.0f64;
        let base = bscene.emissivity_at(0).unwrap();
        for pix in 0..bscene.spec.width / 2 {
            let e = bscene.emissivity_at(pix).unwrap();
            let d = e
                .iter()
                .zip(&base)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            spread = spread.max(d);
        }
        assert!(spread > 0.02, "intra-class spread {spread} should exceed inter contrast");
    }

    #[test]
    fn tiny_scene_rejected() {
        let mut spec = small_spec(0.0);
        spec.width = 4;
        assert!(matches!(
            make_synthetic_scene(&spec),
            Err(ForwardError::SceneSpec(_))
        ));
    }

    #[test]
    fn over_perturbed_scene_rejected() {
        let mut spec = small_spec(0.5);
        spec.regions[0].base = EmissivityBase::Ramp { offset: 0.5, slope: 0.45, bow: 0.0 };
        assert!(matches!(
            make_synthetic_scene(&spec),
            Err(ForwardError::ClippingExceeded { .. })
        ));
    }

    #[test]
    fn render_scene_matches_render_pixel() {
        let scene = make_synthetic_scene(&small_spec(0.05)).unwrap();
        let amb = AmbientSpectra::graybody(260.0, 290.0, &scene.grid).unwrap();
        let cube = render_scene(&scene, &amb).unwrap();
        for pix in [0usize, 5, scene.pixels() - 1] {
            let truth = scene.truth_at(pix).unwrap();
            let s = render_pixel(&truth, &amb).unwrap();
            let got = cube.pixel_spectrum(pix);
            for (a, b) in got.iter().zip(&s) {
                assert_eq!(*a, *b as f32 as f64, "cube stores f32-rounded renders");
            }
        }
        assert_eq!(cube.provenance(), Provenance::Clean);
    }

    #[test]
    fn noise_is_deterministic_and_calibrated() {
        let mut spec = small_spec(0.05);
        spec.width = 64;
        spec.height = 64;
        let scene = make_synthetic_scene(&spec).unwrap();
        let amb = AmbientSpectra::graybody(260.0, 290.0, &scene.grid).unwrap();
        let cube = render_scene(&scene, &amb).unwrap();

        let n1 = add_noise(&cube, 30.0, 99);
        let n2 = add_noise(&cube, 30.0, 99);
        assert_eq!(n1.data(), n2.data(), "same seed must be bit-identical");
        assert_ne!(n1.data(), add_noise(&cube, 30.0, 100).data());

        let id = add_noise(&cube, f64::INFINITY, 1);
        assert_eq!(id.data(), cube.data());

        // empirical SNR within 0.5 dB
        let noise_power: f64 = n1
            .data()
            .iter()
            .zip(cube.data())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / cube.data().len() as f64;
        let snr = 20.0 * (cube.rms() / noise_power.sqrt()).log10();
        assert!((snr - 30.0).abs() < 0.5, "empirical snr {snr}");
    }

    #[test]
    fn degenerate_ambient_detected() {
        let grid = test_grid();
        let flat = vec![0.05; grid.len()];
        let amb = AmbientSpectra::new(grid, flat.clone(), flat).unwrap();
        assert!(amb.is_degenerate());
        assert!(!test_ambient().is_degenerate());
    }
}
