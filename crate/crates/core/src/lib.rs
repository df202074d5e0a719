//! Single-pixel imaging primitives.
//!
//! The camera is modelled as a linear map `y = Φ·x + q` where the rows of `Φ`
//! are normalized 0/1 Walsh patterns. This crate covers pattern generation and
//! acquisition ([`walsh`], [`acquisition`]), minimum-norm recovery
//! ([`recovery`]), classical iterative baselines ([`baselines`]) and the image
//! quality measures used to score reconstructions ([`metrics`]).

pub mod acquisition;
pub mod baselines;
mod error;
pub mod image;
pub mod metrics;
pub mod recovery;
pub mod walsh;

pub use acquisition::{acquire, acquire_batch, sample_noise, MeasurementVector};
pub use error::{Error, Result};
pub use image::Image;
pub use metrics::QualityScore;
pub use recovery::{
    effective_matrix, l2_reconstruct, min_norm_solve, EffectiveMatrix, MinNormSolver, Recovered,
    SparsifyingBasis,
};
pub use walsh::{build_scanning_basis, hadamard, ScanningBasis};
