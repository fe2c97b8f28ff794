//! Library-based TeX decomposition and TES-style library estimation.
//!
//! Each material carries a fixed emissivity curve. Fitting a pixel against
//! one material is a 1-D search over `T` with a closed-form view factor at
//! each trial temperature; classification picks the material with the
//! smallest fit residual. The library estimator recovers a region's curve
//! with the classic normalized-emissivity recipe: brightness temperature at
//! the best band, a coarse spectral-smoothness scan for the view factor,
//! then direct inversion of the rendering equation.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bspline::{PenaltyOperator, SplineBasis};
use crate::forward::{AmbientSpectra, ForwardError, HyperCube};
use crate::spectral::{brightness_temperature, planck_band, SpectralError};

#[derive(Debug, Error)]
pub enum HadarError {
    #[error("material library is empty")]
    EmptyLibrary,
    #[error("material '{name}' curve length {got} does not match grid length {expected}")]
    CurveLength {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("material '{name}' emissivity at band {band} is {value}, outside (0, 1)")]
    CurveOutOfRange {
        name: String,
        band: usize,
        value: f64,
    },
    #[error("cube and ambient spectral grids do not match")]
    GridMismatch,
    #[error("region mask selects no pixels")]
    EmptyMask,
    #[error("mask length {got} does not match {expected} pixels")]
    MaskLength { expected: usize, got: usize },
    #[error("no usable band for library estimation (all bands excluded)")]
    AllBandsExcluded,
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialEntry {
    pub name: String,
    pub emissivity: Vec<f64>,
}

/// Pre-calibrated material emissivity curves on the working grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialLibrary {
    entries: Vec<MaterialEntry>,
}

impl MaterialLibrary {
    pub fn new(entries: Vec<MaterialEntry>, bands: usize) -> Result<Self, HadarError> {
        if entries.is_empty() {
            return Err(HadarError::EmptyLibrary);
        }
        for entry in &entries {
            if entry.emissivity.len() != bands {
                return Err(HadarError::CurveLength {
                    name: entry.name.clone(),
                    expected: bands,
                    got: entry.emissivity.len(),
                });
            }
            for (band, &e) in entry.emissivity.iter().enumerate() {
                if !(e > 0.0 && e < 1.0) || !e.is_finite() {
                    return Err(HadarError::CurveOutOfRange {
                        name: entry.name.clone(),
                        band,
                        value: e,
                    });
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[MaterialEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn default_t_margin() -> f64 {
    20.0
}

fn default_t_step() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HadarConfig {
    /// Fixed temperature range; absent means per-pixel brightness
    /// temperature ± `t_margin`.
    #[serde(default)]
    pub t_range: Option<(f64, f64)>,
    #[serde(default = "default_t_margin")]
    pub t_margin: f64,
    #[serde(default = "default_t_step")]
    pub t_step: f64,
}

impl Default for HadarConfig {
    fn default() -> Self {
        Self {
            t_range: None,
            t_margin: default_t_margin(),
            t_step: default_t_step(),
        }
    }
}

impl HadarConfig {
    pub fn validate(&self) -> Result<(), HadarError> {
        if let Some((lo, hi)) = self.t_range {
            if !(lo > 0.0 && lo < hi) {
                return Err(HadarError::Config(format!("invalid t_range ({lo}, {hi})")));
            }
        }
        if !(self.t_margin > 0.0 && self.t_step > 0.0) {
            return Err(HadarError::Config("t_margin and t_step must be positive".into()));
        }
        Ok(())
    }
}

/// One material's best fit to a spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialFit {
    pub temperature: f64,
    pub view_factor: f64,
    /// `sqrt(Σ (S−M)²)`.
    pub residual_norm: f64,
    pub v_identifiable: bool,
}

fn pixel_t_range(spectrum: &[f64], ambient: &AmbientSpectra, config: &HadarConfig) -> (f64, f64) {
    if let Some(range) = config.t_range {
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
    match brightness_temperature(best_val, ambient.grid().values()[best_band]) {
        Ok(bt) => ((bt - config.t_margin).max(1.0), bt + config.t_margin),
        Err(_) => (200.0, 400.0),
    }
}

/// Fits `(T, V)` for one emissivity curve. The model is affine in `V` at
/// fixed `T`, so `V` has the closed form
/// `clamp(Σ c·(S − e·B(T) − (1−e)·S_g) / Σ c², 0, 1)` with
/// `c = (1−e)(S_sky−S_g)`; `T` is found by grid search plus golden-section
/// refinement.
pub fn fit_material(
    spectrum: &[f64],
    emissivity: &[f64],
    ambient: &AmbientSpectra,
    config: &HadarConfig,
) -> Result<MaterialFit, HadarError> {
    if spectrum.len() != ambient.len() || emissivity.len() != ambient.len() {
        return Err(HadarError::GridMismatch);
    }
    config.validate()?;
    let n = ambient.len();
    let c: Vec<f64> = (0..n)
        .map(|i| (1.0 - emissivity[i]) * (ambient.sky()[i] - ambient.ground()[i]))
        .collect();
    let cc: f64 = c.iter().map(|v| v * v).sum();
    let v_identifiable = cc > 0.0;
    let nus = ambient.grid().values();

    let eval = |t: f64| -> (f64, f64) {
        // returns (V, residual sum of squares)
        let mut num = 0.0;
        for i in 0..n {
            let base = emissivity[i] * planck_band(t, nus[i])
                + (1.0 - emissivity[i]) * ambient.ground()[i];
            num += c[i] * (spectrum[i] - base);
        }
        let v = if v_identifiable {
            (num / cc).clamp(0.0, 1.0)
        } else {
            0.5
        };
        let mut rss = 0.0;
        for i in 0..n {
            let m = emissivity[i] * planck_band(t, nus[i])
                + (1.0 - emissivity[i]) * (ambient.ground()[i] + v * (ambient.sky()[i] - ambient.ground()[i]));
            let r = spectrum[i] - m;
            rss += r * r;
        }
        (v, rss)
    };

    let (t_lo, t_hi) = pixel_t_range(spectrum, ambient, config);
    let steps = ((t_hi - t_lo) / config.t_step + 1e-9).floor() as usize;
    let mut best_t = t_lo;
    let mut best = eval(t_lo);
    for i in 1..=steps {
        let t = t_lo + i as f64 * config.t_step;
        let cand = eval(t);
        if cand.1 < best.1 {
            best = cand;
            best_t = t;
        }
    }
    // golden-section refinement around the best grid point
    let (mut a, mut b) = (
        (best_t - config.t_step).max(t_lo),
        (best_t + config.t_step).min(t_hi),
    );
    const RESP: f64 = 2.0 - 1.618_033_988_749_895;
    let mut x1 = a + RESP * (b - a);
    let mut x2 = b - RESP * (b - a);
    let mut f1 = eval(x1);
    let mut f2 = eval(x2);
    for _ in 0..24 {
        if f1.1 < f2.1 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = a + RESP * (b - a);
            f1 = eval(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = b - RESP * (b - a);
            f2 = eval(x2);
        }
    }
    let (t_ref, fit_ref) = if f1.1 < f2.1 { (x1, f1) } else { (x2, f2) };
    if fit_ref.1 < best.1 {
        best_t = t_ref;
        best = fit_ref;
    }
    Ok(MaterialFit {
        temperature: best_t,
        view_factor: best.0,
        residual_norm: best.1.sqrt(),
        v_identifiable,
    })
}

/// Classification of one pixel against a library.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    /// Index into the library; ties break toward the lower index.
    pub material: usize,
    pub fit: MaterialFit,
}

pub fn classify_pixel(
    spectrum: &[f64],
    library: &MaterialLibrary,
    ambient: &AmbientSpectra,
    config: &HadarConfig,
) -> Result<Classification, HadarError> {
    let mut best: Option<Classification> = None;
    for (idx, entry) in library.entries.iter().enumerate() {
        let fit = fit_material(spectrum, &entry.emissivity, ambient, config)?;
        let better = match &best {
            None => true,
            Some(b) => fit.residual_norm < b.fit.residual_norm,
        };
        if better {
            best = Some(Classification {
                material: idx,
                fit,
            });
        }
    }
    best.ok_or(HadarError::EmptyLibrary)
}

/// Per-pixel classification over a whole cube.
#[derive(Debug, Clone, PartialEq)]
pub struct HadarResult {
    pub width: usize,
    pub height: usize,
    pub material: Vec<u16>,
    pub temperature: Vec<f64>,
    pub view_factor: Vec<f64>,
    pub residual_norm: Vec<f64>,
    pub v_identifiable: Vec<bool>,
    pub config: HadarConfig,
}

pub fn decompose_cube_hadar(
    cube: &HyperCube,
    library: &MaterialLibrary,
    ambient: &AmbientSpectra,
    config: &HadarConfig,
) -> Result<HadarResult, HadarError> {
    if cube.grid() != ambient.grid() {
        return Err(HadarError::GridMismatch);
    }
    config.validate()?;
    let pixels = cube.pixels();
    let classified: Result<Vec<Classification>, HadarError> = (0..pixels)
        .into_par_iter()
        .map(|pix| classify_pixel(&cube.pixel_spectrum(pix), library, ambient, config))
        .collect();
    let classified = classified?;
    let mut out = HadarResult {
        width: cube.width(),
        height: cube.height(),
        material: Vec::with_capacity(pixels),
        temperature: Vec::with_capacity(pixels),
        view_factor: Vec::with_capacity(pixels),
        residual_norm: Vec::with_capacity(pixels),
        v_identifiable: Vec::with_capacity(pixels),
        config: config.clone(),
    };
    for c in classified {
        out.material.push(c.material as u16);
        out.temperature.push(c.fit.temperature);
        out.view_factor.push(c.fit.view_factor);
        out.residual_norm.push(c.fit.residual_norm);
        out.v_identifiable.push(c.fit.v_identifiable);
    }
    Ok(out)
}

/// A region's estimated emissivity curve with per-band spread statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct LibraryEstimate {
    pub emissivity: Vec<f64>,
    /// Inter-pixel interquartile range per band.
    pub iqr: Vec<f64>,
    /// Bands that had to be filled from the spline fit in at least one pixel.
    pub excluded_band_count: usize,
}

const ESTIMATE_CLIP_LO: f64 = 0.01;
const ESTIMATE_CLIP_HI: f64 = 0.999;

/// TES-style estimation of a region's emissivity curve.
///
/// Per masked pixel: `T̂` is the maximum over bands of the brightness
/// temperature (normalized-emissivity assumption: the best band has
/// emissivity near one), `V̂` minimizes the bandwise roughness of the
/// implied emissivity over a coarse grid, and
/// `ê = (S − X)/(B(T̂) − X)` clipped to `(0.01, 0.999)`. Bands where the
/// denominator vanishes are filled from a smoothing-spline fit of the
/// remaining bands. The returned curve is the bandwise median over pixels.
pub fn estimate_library_emissivity(
    cube: &HyperCube,
    mask: &[bool],
    ambient: &AmbientSpectra,
) -> Result<LibraryEstimate, HadarError> {
    if cube.grid() != ambient.grid() {
        return Err(HadarError::GridMismatch);
    }
    if mask.len() != cube.pixels() {
        return Err(HadarError::MaskLength {
            expected: cube.pixels(),
            got: mask.len(),
        });
    }
    let selected: Vec<usize> = (0..cube.pixels()).filter(|&p| mask[p]).collect();
    if selected.is_empty() {
        return Err(HadarError::EmptyMask);
    }
    let n = ambient.len();
    let nus = ambient.grid().values();
    let basis = SplineBasis::for_grid(ambient.grid(), 12.min(n).max(4))?;
    let penalty = PenaltyOperator::new(basis.coeff_count())?;
    let phi = basis.design_matrix(ambient.grid())?;

    let mut curves: Vec<Vec<f64>> = Vec::with_capacity(selected.len());
    let mut excluded_any = vec![false; n];
    for &pix in &selected {
        let s = cube.pixel_spectrum(pix);
        let mut t_hat = f64::MIN;
        for (i, &v) in s.iter().enumerate() {
            if v > 0.0 {
                if let Ok(bt) = brightness_temperature(v, nus[i]) {
                    t_hat = t_hat.max(bt);
                }
            }
        }
        if t_hat == f64::MIN {
            continue; // nothing positive; skip pixel
        }
        let b_t: Vec<f64> = nus.iter().map(|&nu| planck_band(t_hat, nu)).collect();

        // V from a coarse roughness-minimizing scan
        let implied = |v: f64| -> (Vec<f64>, Vec<bool>) {
            let mut e = vec![0.0; n];
            let mut ok = vec![true; n];
            for i in 0..n {
                let x = v * ambient.sky()[i] + (1.0 - v) * ambient.ground()[i];
                let den = b_t[i] - x;
                if den.abs() <= 1e-6 * b_t[i].abs() {
                    ok[i] = false;
                } else {
                    e[i] = ((s[i] - x) / den).clamp(ESTIMATE_CLIP_LO, ESTIMATE_CLIP_HI);
                }
            }
            // fill excluded bands by nearest-neighbor bridge for the scan
            for i in 0..n {
                if !ok[i] {
                    let left = (0..i).rev().find(|&j| ok[j]);
                    let right = (i + 1..n).find(|&j| ok[j]);
                    e[i] = match (left, right) {
                        (Some(l), Some(r)) => {
                            let w = (i - l) as f64 / (r - l) as f64;
                            e[l] * (1.0 - w) + e[r] * w
                        }
                        (Some(l), None) => e[l],
                        (None, Some(r)) => e[r],
                        (None, None) => 0.5,
                    };
                }
            }
            (e, ok)
        };
        let mut best_v = 0.0;
        let mut best_rough = f64::INFINITY;
        let mut vq = 0.0;
        while vq <= 1.0 + 1e-9 {
            let (e, _) = implied(vq.min(1.0));
            let rough: f64 = e
                .windows(3)
                .map(|w| {
                    let d = w[0] - 2.0 * w[1] + w[2];
                    d * d
                })
                .sum();
            if rough < best_rough {
                best_rough = rough;
                best_v = vq.min(1.0);
            }
            vq += 0.02;
        }
        let (mut e_hat, ok) = implied(best_v);
        if ok.iter().all(|&o| !o) {
            return Err(HadarError::AllBandsExcluded);
        }
        if ok.iter().any(|&o| !o) {
            // spline fit over the included bands, light curvature ridge
            let k = basis.coeff_count();
            let mut h = penalty.gram() * 1e-6;
            let mut rhs = DVector::zeros(k);
            for i in 0..n {
                if !ok[i] {
                    continue;
                }
                for a in 0..k {
                    let pa = phi[(i, a)];
                    if pa == 0.0 {
                        continue;
                    }
                    rhs[a] += pa * e_hat[i];
                    for b in 0..k {
                        h[(a, b)] += pa * phi[(i, b)];
                    }
                }
            }
            if let Some(chol) = Cholesky::new(h) {
                let beta = chol.solve(&rhs);
                for i in 0..n {
                    if !ok[i] {
                        excluded_any[i] = true;
                        let mut v = 0.0;
                        for a in 0..k {
                            v += phi[(i, a)] * beta[a];
                        }
                        e_hat[i] = v.clamp(ESTIMATE_CLIP_LO, ESTIMATE_CLIP_HI);
                    }
                }
            }
        }
        curves.push(e_hat);
    }
    if curves.is_empty() {
        return Err(HadarError::EmptyMask);
    }

    let mut emissivity = vec![0.0; n];
    let mut iqr = vec![0.0; n];
    let mut column: Vec<f64> = Vec::with_capacity(curves.len());
    for band in 0..n {
        column.clear();
        column.extend(curves.iter().map(|c| c[band]));
        column.sort_by(|a, b| a.total_cmp(b));
        emissivity[band] = quantile_sorted(&column, 0.5);
        iqr[band] = quantile_sorted(&column, 0.75) - quantile_sorted(&column, 0.25);
    }
    Ok(LibraryEstimate {
        emissivity,
        iqr,
        excluded_band_count: excluded_any.iter().filter(|&&x| x).count(),
    })
}

/// Linear-interpolated quantile of an ascending-sorted slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}
