//! Experiment plumbing: configuration, toy datasets, training and the
//! verification suites.

pub mod config;
pub mod data;
pub mod train;
pub mod verify;

pub use config::ExperimentConfig;
pub use data::ToyDataset;
pub use train::{train, MetricsRecord, TrainOutcome};
pub use verify::{run_verify, Check, SuiteReport, VerifyOptions, VerifyReport};
