//! Hyperspectral thermal TeX decomposition toolkit.
//!
//! A thermal spectrum mixes three physical attributes: the surface
//! temperature `T`, the spectral emissivity `e(ν)`, and the scene texture
//! carried by the sky view factor `V`. This crate provides the pieces
//! needed to take them apart and to study when that separation works:
//!
//! * [`spectral`] — Planck radiance and wavenumber-grid utilities.
//! * [`bspline`] — clamped cubic B-spline bases and the second-difference
//!   curvature penalty.
//! * [`forward`] — the two-source rendering model, counterfactual
//!   emissivity construction, synthetic scene generation, and noise.
//! * [`slot`] — the library-free SLOT solver: per-pixel bound-constrained,
//!   smoothness-regularized least squares over `(T, V, β)`.
//! * [`hadar`] — the material-library baseline: per-material fits,
//!   residual classification, and TES-style library estimation.
//! * [`metrics`] — scalar texture-quality metrics (EN, AG, SF, SD).
//! * [`io`] — file formats: radiance cubes, scalar maps, ambient CSV,
//!   16-bit PNG map rendering.

pub mod bspline;
pub mod forward;
pub mod hadar;
pub mod io;
pub mod metrics;
pub mod slot;
pub mod spectral;

pub use bspline::{PenaltyOperator, SplineBasis};
pub use forward::{AmbientSpectra, HyperCube, PixelTruth, SceneSpec, SyntheticScene};
pub use hadar::{HadarConfig, HadarResult, MaterialLibrary};
pub use slot::{PixelSolution, SlotConfig, TexResult};
pub use spectral::SpectralGrid;
