//! Command line harness: experiment configs, image I/O, checkpoints and the
//! `train`, `eval`, `reconstruct` and `synth` commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod images;
pub mod task;

pub use checkpoint::Checkpoint;
pub use config::{DataConfig, ExperimentConfig};
pub use error::{CliError, CliResult};
pub use task::Task;
