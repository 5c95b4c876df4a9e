//! Grid-cell population codes for 2-D integer points, a determinantal
//! attention objective over those codes, and the training harness that
//! uses them for out-of-distribution analogy and arithmetic problems.
//!
//! The crate is organised bottom-up:
//!
//! - [`gridcode`] encodes points as rectified sums of three planar cosines.
//! - [`dppa`] builds the cell kernel from training-region statistics and
//!   fits attention weights with the within-frequency log-determinant.
//! - [`tasks`] generates analogy/arithmetic problems and their OOD regions.
//! - [`nn`] is a small reverse-mode engine with LSTM and transformer scorers.
//! - [`trainer`] runs the two-step procedure, baselines and ablations.
//! - [`artifact`] holds the on-disk formats shared with the CLI.

pub mod artifact;
pub mod dppa;
pub mod error;
pub mod gridcode;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
