//! Experiment tooling around `feddwa-core`: TOML configs, run artifacts and
//! comparisons. The `feddwa` binary is a thin CLI over this crate.

pub mod config;
pub mod error;
pub mod output;
pub mod runner;

pub use config::{parse_config, parse_config_str, ExperimentConfig};
pub use error::{ExpError, Result};
