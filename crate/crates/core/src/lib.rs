//! Shape from polarization: Stokes algebra, Fresnel inversion, underwater
//! scattering simulation, normal-map codecs, quality metrics, normal
//! integration, patch tiling and a scene-directory pipeline.
//!
//! Per-pixel work runs data-parallel on rayon with the `parallel` feature
//! (default). Parallel and sequential runs give bit-identical results; see
//! [`par`].

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod fresnel;
pub mod integrator;
pub mod io;
pub mod metrics;
pub mod normal;
pub mod par;
pub mod patchwork;
pub mod pipeline;
pub mod polar;
pub mod scatter;

pub use error::{Error, Result};
pub use normal::NormalMap;
pub use polar::{Mask, Plane, PolarizationStack, StokesImage};
