//! Configuration, persistence and sweep orchestration for `okdrop`.

pub mod analyze;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod output;
pub mod sweep;

pub use config::{validate_config_file, AnalysisParams, ExperimentConfig};
pub use error::{HarnessError, Result};
pub use manifest::Manifest;
pub use sweep::{run_sweep, SweepOutcome};
