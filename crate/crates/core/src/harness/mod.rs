//! Data, configuration, experiment orchestration and reports.

pub mod config;
pub mod data;
pub mod experiment;
pub mod report;

pub use config::ExperimentConfig;
pub use experiment::{run_experiment, ResultRow, RunResult};
pub use report::emit_report;
