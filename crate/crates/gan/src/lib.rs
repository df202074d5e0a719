//! Convolutional refinement of ℓ2 single-pixel reconstructions.
//!
//! A residual generator maps the noisy minimum-norm estimate to a clean
//! image. It is trained against a convolutional discriminator with a
//! pixel MSE term, a perceptual term computed by a frozen VGG-style feature
//! extractor, and an adversarial term. All arithmetic is `f64` with
//! hand-written backward passes.

pub mod checkpoint;
pub mod discriminator;
mod error;
pub mod features;
pub mod generator;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod optim;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use error::{Error, Result};
pub use features::{ExtractorConfig, FeatureExtractor, WeightSource};
pub use generator::{Generator, GeneratorConfig};
pub use layers::Module;
pub use losses::{LossComponents, LossWeights};
pub use tensor::Tensor;
pub use train::{train, EpochStats, GanState, TrainConfig, TrainOutcome};
