//! Experiment runner for maskstrike: configuration, resumable attack runs,
//! aggregate tables and report rendering.

pub mod config;
pub mod experiment;
pub mod report;

pub use config::ExperimentConfig;
pub use experiment::{run_experiment, RunManifest};
