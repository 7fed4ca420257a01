//! Experiment orchestration for the `bilevel` binary: config files,
//! checkpoints and the pipeline stages.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod pipeline;
pub mod tabulate;

pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use pipeline::{Context, Method};
