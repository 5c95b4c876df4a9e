//! Experiment driver: dataset generation, kernel building, attention
//! fitting, training sweeps, evaluation and reporting over a directory of
//! hash-checked artifacts.

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::{Condition, ExperimentConfig, SweepFamily};
pub use pipeline::{Layout, RunOptions};
