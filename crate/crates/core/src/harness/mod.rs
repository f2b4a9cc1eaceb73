//! Experiment orchestration and reporting.

pub mod config;
pub mod experiment;
pub mod report;

pub use config::{parse_kv, ConfigError};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentOutcome, RunResult, Stage, StageFailure};
pub use report::{efficiency, emit_report, slowdown, EfficiencyReport, ReportFormat};
