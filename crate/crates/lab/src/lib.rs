//! Experiment harness: configs, runners, tidy CSV output and run manifests.

pub mod agents;
pub mod config;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod output;

pub use config::ExperimentConfig;
pub use error::{LabError, LabResult};
pub use experiments::{run_experiment, Outcome, RunOutput};
