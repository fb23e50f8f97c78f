//! Experiment driver for the calibration pipeline: configuration, runs,
//! ablations, projection export and gradient checks.

pub mod commands;
pub mod config;
pub mod report;
pub mod runner;

pub use commands::{CliError, Overrides};
pub use config::{ConfigError, ExperimentConfig};
