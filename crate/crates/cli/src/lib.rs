//! Pipeline front end: config handling, run-directory manifests and the
//! `simulate`, `train`, `reconstruct`, `evaluate` and `report` stages.

pub mod cli;
pub mod config;
pub mod pipeline;
pub mod store;

pub use config::{ExperimentConfig, Method};
pub use pipeline::{RunOptions, TrainKind};
pub use store::Layout;
