//! Experiment harness around `stackfreight-core`: TOML scenario
//! configuration, the benchmark scenarios, Case-1/Case-2 comparison,
//! truck-closure sweeps and CSV/JSON output.

pub mod config;
pub mod error;
pub mod experiments;
pub mod io;

pub use config::{Scale, ScenarioConfig};
pub use error::CliError;
pub use stackfreight_core as core;
