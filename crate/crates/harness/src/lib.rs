//! Experiment harness for the simulated GPU inference fleet: configuration,
//! virtual and wall-clock runs, outputs, the wire protocol and the metrics
//! endpoint.

pub mod config;
pub mod experiment;
pub mod exposition;
pub mod wallclock;
pub mod wire;

pub use config::{ConfigError, ExperimentConfig, Mode};
pub use experiment::{compare, compare_configs, run_experiment, summarize, ExperimentError, ExperimentResult, RunSummary};
