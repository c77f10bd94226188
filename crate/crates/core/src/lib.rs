//! Simulation twin of a hemispherical, two-layer colour-marker tactile sensor.
//!
//! The sensor carries two concentric domes of markers: cyan filters on the
//! outer dome and magenta filters on the inner dome, aligned along radial
//! rays. A fisheye camera at the dome centre sees each marker as the
//! subtractive mix of the two filters. Normal compression of the elastomer
//! between the domes changes the mixed colour and apparent size of every
//! marker; tangential motion shifts the cyan disk against the magenta one.
//!
//! The crate covers the full forward and inverse chain:
//!
//! 1. [`geometry`]: uniform marker layout on a hemisphere, paired across layers.
//! 2. [`mechanics`]: Hertzian contact, the gaussian subsurface field and
//!    per-marker displacements.
//! 3. [`renderer`]: equal-area fisheye projection and anti-aliased
//!    subtractive-mixing rasterisation of both layers.
//! 4. [`imaging`]: blur, flat-field correction, HSV segmentation, centroids
//!    and sub-image extraction.
//! 5. [`calibration`]: the linear sub-image → normal displacement map solved
//!    with an SVD pseudo-inverse.
//! 6. [`estimation`]: field reconstruction, gaussian contact fit and the
//!    curvature estimate.
//! 7. [`experiment`]: configuration, dataset simulation, calibration and
//!    evaluation commands used by the `tactwin` binary.

pub mod calibration;
pub mod config;
pub mod error;
pub mod estimation;
pub mod experiment;
pub mod geometry;
pub mod imaging;
pub mod mechanics;
pub mod renderer;
mod text;

pub use error::{Error, Result};

/// 3D point or vector in millimetres, sensor frame (z along the optical axis).
pub type Vec3 = nalgebra::Vector3<f64>;
