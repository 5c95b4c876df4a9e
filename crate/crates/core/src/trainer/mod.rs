//! The two-step pipeline, its baselines and ablations, and evaluation.
//!
//! Every run goes through [`Session`]: `prepare` fits or accepts the
//! frequency attention, embeds every point once and initialises the model;
//! `train` runs the task loop and evaluates the best-validation parameters.

mod config;
pub mod data;
mod diagnostic;
pub mod model;
mod session;

pub use config::{AblationEmbedding, Method, ScorerKind, Task, TestRegime, TrainConfig};
pub use data::{correct_flags, Batch, Embedder, FeatureTable};
pub use diagnostic::{multiplication_diagnostic, OpDistances};
pub use session::{grid_kernel, Session, TrainInputs, TrainedRun};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Mse,
}

impl Metric {
    /// Whether `a` is strictly better than `b`.
    pub fn improves(self, a: f64, b: f64) -> bool {
        match self {
            Metric::Accuracy => a > b,
            Metric::Mse => a < b,
        }
    }
}

/// Per-epoch task loss and metric. The `train` split is a fixed subset of
/// the training set, evaluated like validation (no dropout, no penalty).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    /// Accuracy, or MSE for regression runs.
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMetric {
    /// `train`, `val` or the region index `K`.
    pub region: String,
    /// `all`, or `add`/`multiply` for arithmetic.
    pub subset: String,
    pub value: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub f_max: usize,
    pub per_frequency_objective: Vec<f64>,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub method: String,
    pub metric: Metric,
    pub epochs: Vec<EpochMetrics>,
    /// Training objective of every update, in order.
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
    /// Evaluated with the best-validation parameters.
    pub regions: Vec<RegionMetric>,
    pub attention: Option<AttentionSummary>,
    pub architecture_hash: String,
    pub checkpoint: Option<String>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn region(&self, region: &str, subset: &str) -> Option<&RegionMetric> {
        self.regions.iter().find(|r| r.region == region && r.subset == subset)
    }

    /// Mean over test regions (everything except `train` and `val`).
    pub fn mean_test(&self, subset: &str) -> f64 {
        let v: Vec<f64> = self
            .regions
            .iter()
            .filter(|r| r.subset == subset && r.region != "train" && r.region != "val")
            .map(|r| r.value)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn epoch_metric(&self, epoch: usize, split: &str) -> Option<&EpochMetrics> {
        self.epochs.iter().find(|e| e.epoch == epoch && e.split == split)
    }
}
