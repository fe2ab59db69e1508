//! Training harness for the learnable-multiplier lab: synthetic data, run
//! configs, metrics, the training loop and the named experiments.

pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod sweep;
pub mod train;

pub use config::RunConfig;
pub use error::{LabError, Result};
pub use train::{run_training, RunResult, RunStatus};
