//! Experiment configuration: one JSON document describing data, codes,
//! kernel, training settings and the conditions to run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use griddpp::artifact::hash_json;
use griddpp::dppa::KernelConfig;
use griddpp::gridcode::GridCodeConfig;
use griddpp::nn::transformer::TransformerConfig;
use griddpp::tasks::RejectionBudget;
use griddpp::trainer::{Method, ScorerKind, Task, TestRegime, TrainConfig};
use griddpp::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub root_seed: u64,
    #[serde(default)]
    pub grid: GridCodeConfig,
    #[serde(default)]
    pub kernel: KernelConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainSection,
    pub conditions: Vec<Condition>,
    #[serde(default)]
    pub seeds: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub task: Task,
    #[serde(default)]
    pub m: Option<i64>,
    #[serde(default)]
    pub n_train: Option<usize>,
    #[serde(default)]
    pub n_val: Option<usize>,
    #[serde(default)]
    pub n_per_region: Option<usize>,
    #[serde(default)]
    pub regions: Option<Vec<u32>>,
    #[serde(default)]
    pub regime: Option<TestRegime>,
    #[serde(default)]
    pub rejection_budget: Option<u64>,
}

/// Overrides of the per-task training defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default)]
    pub scorer: Option<ScorerKind>,
    #[serde(default)]
    pub dpp_epochs: Option<usize>,
    #[serde(default)]
    pub task_epochs: Option<usize>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub dpp_learning_rate: Option<f64>,
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default)]
    pub transformer: Option<TransformerConfig>,
    #[serde(default)]
    pub eval_batch_size: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepFamily {
    L1,
    OnestepWhole,
    OnestepWithin,
}

impl SweepFamily {
    pub fn method(self, lambda: f64) -> Method {
        match self {
            SweepFamily::L1 => Method::L1 { lambda },
            SweepFamily::OnestepWhole => Method::OnestepWhole { lambda },
            SweepFamily::OnestepWithin => Method::OnestepWithin { lambda },
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SweepFamily::L1 => "l1",
            SweepFamily::OnestepWhole => "onestep_whole",
            SweepFamily::OnestepWithin => "onestep_within",
        }
    }
}

/// One line of the results table: a fixed method, or a penalty weight
/// chosen on validation data from the first seed's runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Condition {
    Method(Method),
    Sweep { family: SweepFamily, lambdas: Vec<f64> },
}

impl Condition {
    pub fn label(&self) -> String {
        match self {
            Condition::Method(m) => m.label(),
            Condition::Sweep { family, .. } => family.label().to_string(),
        }
    }

    pub fn needs_attention(&self) -> bool {
        matches!(self, Condition::Method(m) if m.needs_attention())
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Artifact(format!("{}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.normalized()
    }

    /// Fills every default explicitly and validates the result. Idempotent.
    pub fn normalized(&self) -> Result<Self> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let mut cfg = self.clone();
        let task = cfg.data.task;
        let d = &mut cfg.data;
        let (n_train, n_val, regime) = match task {
            Task::Analogy => (653_216, 163_304, TestRegime::Translation),
            Task::Arithmetic => (80_000, 20_000, TestRegime::Regions),
        };
        d.m.get_or_insert(100);
        d.n_train.get_or_insert(n_train);
        d.n_val.get_or_insert(n_val);
        d.n_per_region.get_or_insert(20_000);
        d.regions.get_or_insert_with(|| (1..=9).collect());
        d.regime.get_or_insert(regime);
        d.rejection_budget.get_or_insert(RejectionBudget::default().max_draws);

        let t = &mut cfg.train;
        let scorer = *t.scorer.get_or_insert(ScorerKind::Lstm);
        let base = TrainConfig::defaults(task, scorer, Method::Dppa);
        t.dpp_epochs.get_or_insert(base.dpp_epochs);
        t.task_epochs.get_or_insert(base.task_epochs);
        t.batch_size.get_or_insert(base.batch_size);
        t.learning_rate.get_or_insert(base.learning_rate);
        t.dpp_learning_rate.get_or_insert(base.dpp_learning_rate);
        t.hidden.get_or_insert(base.hidden);
        t.transformer.get_or_insert(base.transformer);
        t.eval_batch_size.get_or_insert(base.eval_batch_size);
        cfg.seeds.get_or_insert(3);

        cfg.grid.validate()?;
        cfg.kernel.validate()?;
        if cfg.conditions.is_empty() {
            return Err(Error::InvalidConfig("at least one condition is required".into()));
        }
        if cfg.seeds == Some(0) {
            return Err(Error::InvalidConfig("seeds must be at least 1".into()));
        }
        if cfg.data.m.unwrap() < 2 {
            return Err(Error::InvalidConfig("M must be at least 2".into()));
        }
        for c in &cfg.conditions {
            match c {
                Condition::Method(m) => cfg.train_config(*m, 0).validate()?,
                Condition::Sweep { family, lambdas } => {
                    if lambdas.is_empty() {
                        return Err(Error::InvalidConfig(format!("{} sweep has no lambdas", family.label())));
                    }
                    for &l in lambdas {
                        cfg.train_config(family.method(l), 0).validate()?;
                    }
                }
            }
        }
        Ok(cfg)
    }

    pub fn m(&self) -> i64 {
        self.data.m.expect("normalized")
    }

    pub fn seeds(&self) -> usize {
        self.seeds.expect("normalized")
    }

    pub fn regime(&self) -> TestRegime {
        self.data.regime.expect("normalized")
    }

    /// The fully resolved training configuration of one run.
    pub fn train_config(&self, method: Method, seed: u64) -> TrainConfig {
        let t = &self.train;
        let scorer = t.scorer.unwrap_or(ScorerKind::Lstm);
        let base = TrainConfig::defaults(self.data.task, scorer, method);
        TrainConfig {
            regime: self.data.regime.unwrap_or(base.regime),
            dpp_epochs: t.dpp_epochs.unwrap_or(base.dpp_epochs),
            task_epochs: t.task_epochs.unwrap_or(base.task_epochs),
            batch_size: t.batch_size.unwrap_or(base.batch_size),
            learning_rate: t.learning_rate.unwrap_or(base.learning_rate),
            dpp_learning_rate: t.dpp_learning_rate.unwrap_or(base.dpp_learning_rate),
            hidden: t.hidden.unwrap_or(base.hidden),
            transformer: t.transformer.clone().unwrap_or(base.transformer.clone()),
            eval_batch_size: t.eval_batch_size.unwrap_or(base.eval_batch_size),
            seed,
            ..base
        }
    }

    pub fn hash(&self) -> String {
        hash_json(self)
    }

    /// Hash of everything the datasets depend on.
    pub fn data_hash(&self) -> String {
        hash_json(&(&self.data, self.root_seed, self.grid.coverage_extent))
    }

    /// Hash of everything the codebook and kernel depend on.
    pub fn kernel_hash(&self) -> String {
        hash_json(&(&self.grid, &self.kernel, self.m()))
    }

    /// Hash of everything the fitted attention depends on.
    pub fn attention_hash(&self) -> String {
        let t = &self.train;
        hash_json(&(self.kernel_hash(), self.data.n_train, t.dpp_epochs, t.batch_size, t.dpp_learning_rate))
    }
}
