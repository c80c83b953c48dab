//! Single-volume super-resolution for 3D magnitude volumes.
//!
//! The crate covers the whole desk-scale pipeline: a k-space forward model
//! that synthesizes low-resolution volumes ([`kspace`]), deterministic
//! phantoms with known geometry ([`phantom`]), a 3D residual U-Net with
//! hand-written gradients ([`net`]), losses and ADAM training ([`train`]),
//! image-quality metrics ([`metrics`]), agreement statistics ([`stats`]), the
//! resolution sweep ([`sweep`]) and the end-to-end orchestration used by the
//! command line ([`pipeline`]).
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases below
//! name the precisions the pipeline actually uses.

pub mod error;
mod io_util;
pub mod kspace;
pub mod metrics;
pub mod net;
pub mod phantom;
pub mod pipeline;
pub mod scalar;
pub mod stats;
pub mod sweep;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use scalar::Real;
pub use volume::{Roi3D, Volume3D};

/// Double-precision volume used by the forward model and the metrics.
pub type Volume = Volume3D<f64>;
/// Single-precision volume fed to the network.
pub type Volume32 = Volume3D<f32>;
