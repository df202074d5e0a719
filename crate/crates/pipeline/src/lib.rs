//! Datasets, experiment sweeps, frame sequences and timing for single-pixel
//! imaging, plus the settings shared by the `spi` command-line tool.

pub mod config;
pub mod dataset;
mod error;
pub mod experiments;
pub mod synthetic;

pub use config::{ExtractorSpec, Settings};
pub use dataset::{load_dataset, synthetic_dataset, DatasetSpec, Splits};
pub use error::{Error, Result};
pub use experiments::{run_sweep, Method, Reconstructor, SweepRow, SweepSpec, TimingModel};
