//! Experiment harness around `fuzzspike`: config files, multi-seed training
//! with checkpoints and metrics, the ablation matrix, and CSV analysis
//! outputs. The `fuzzspike` binary is a thin wrapper over this crate.

pub mod config;
pub mod error;
pub mod experiment;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
