use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::transformer::TransformerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Analogy,
    Arithmetic,
}

/// Which family of test regions a run is evaluated on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestRegime {
    Translation,
    Scaling,
    /// The arithmetic answer regions.
    Regions,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Lstm,
    Transformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum AblationEmbedding {
    OneHot,
    Smoothed {
        sigma: f64,
    },
    /// Full grid codes, for the no-attention comparison.
    Grid,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "name", deny_unknown_fields)]
pub enum Method {
    Dppa,
    Tcn,
    LockedDropout {
        rate: f64,
    },
    L1 {
        lambda: f64,
    },
    NoDppa,
    /// Full embeddings scaled by trainable weights, task loss only.
    NoDppaAttention,
    OnestepWhole {
        lambda: f64,
    },
    OnestepWithin {
        lambda: f64,
    },
    TopK {
        k: usize,
    },
    EmbeddingAblation {
        embedding: AblationEmbedding,
        attention_lambda: Option<f64>,
        encoder: bool,
    },
    Regression {
        dppa: bool,
    },
}

impl Method {
    /// Stable short name used in reports.
    pub fn label(&self) -> String {
        match *self {
            Method::Dppa => "dppa".into(),
            Method::Tcn => "tcn".into(),
            Method::LockedDropout { rate } => format!("locked_dropout({rate})"),
            Method::L1 { lambda } => format!("l1({lambda})"),
            Method::NoDppa => "no_dppa".into(),
            Method::NoDppaAttention => "no_dppa_attention".into(),
            Method::OnestepWhole { lambda } => format!("onestep_whole({lambda})"),
            Method::OnestepWithin { lambda } => format!("onestep_within({lambda})"),
            Method::TopK { k } => format!("topk({k})"),
            Method::EmbeddingAblation { embedding, attention_lambda, encoder } => {
                let e = match embedding {
                    AblationEmbedding::OneHot => "one_hot".to_string(),
                    AblationEmbedding::Smoothed { sigma } => format!("smoothed({sigma})"),
                    AblationEmbedding::Grid => "grid".to_string(),
                };
                let a = attention_lambda.map_or(String::new(), |l| format!(",dpp({l})"));
                let enc = if encoder { ",encoder" } else { "" };
                format!("embedding({e}{a}{enc})")
            }
            Method::Regression { dppa } => if dppa { "regression_dppa" } else { "regression_no_dppa" }.into(),
        }
    }

    /// Whether the run needs the fitted frequency attention.
    pub fn needs_attention(&self) -> bool {
        matches!(self, Method::Dppa | Method::TopK { .. } | Method::Regression { .. })
    }

    pub fn is_regression(&self) -> bool {
        matches!(self, Method::Regression { .. })
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        match *self {
            Method::LockedDropout { rate } if !(0.0..1.0).contains(&rate) => {
                bad(format!("dropout rate {rate} outside [0, 1)"))
            }
            Method::L1 { lambda } | Method::OnestepWhole { lambda } | Method::OnestepWithin { lambda }
                if !(lambda >= 0.0 && lambda.is_finite()) =>
            {
                bad(format!("lambda {lambda} must be finite and non-negative"))
            }
            Method::TopK { k: 0 } => bad("top_k needs K >= 1".into()),
            Method::EmbeddingAblation { embedding: AblationEmbedding::Smoothed { sigma }, .. }
                if !(sigma > 0.0 && sigma.is_finite()) =>
            {
                bad(format!("smoothing sigma {sigma} must be positive"))
            }
            Method::EmbeddingAblation { attention_lambda: Some(l), .. } if !(l >= 0.0 && l.is_finite()) => {
                bad(format!("lambda {l} must be finite and non-negative"))
            }
            _ => Ok(()),
        }
    }
}

/// A fully specified training run. Defaults that depend on the task and
/// scorer come from [`TrainConfig::defaults`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub regime: TestRegime,
    pub scorer: ScorerKind,
    pub method: Method,
    pub dpp_epochs: usize,
    pub task_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dpp_learning_rate: f64,
    pub hidden: usize,
    pub transformer: TransformerConfig,
    pub eval_batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn defaults(task: Task, scorer: ScorerKind, method: Method) -> Self {
        let (batch_size, learning_rate) = match (scorer, task) {
            (ScorerKind::Lstm, _) => (256, 1e-3),
            (ScorerKind::Transformer, Task::Analogy) => (128, 5e-4),
            (ScorerKind::Transformer, Task::Arithmetic) => (128, 5e-5),
        };
        let epochs = match task {
            Task::Analogy => 50,
            Task::Arithmetic => 500,
        };
        let regime = match task {
            Task::Analogy => TestRegime::Translation,
            Task::Arithmetic => TestRegime::Regions,
        };
        TrainConfig {
            task,
            regime,
            scorer,
            method,
            dpp_epochs: epochs,
            task_epochs: epochs,
            batch_size,
            learning_rate,
            dpp_learning_rate: 1e-3,
            hidden: 512,
            transformer: TransformerConfig::default(),
            eval_batch_size: 1024,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if self.hidden == 0 {
            return bad("hidden size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite())
            || !(self.dpp_learning_rate > 0.0 && self.dpp_learning_rate.is_finite())
        {
            return bad("learning rates must be positive and finite");
        }
        if self.method.needs_attention() && self.dpp_epochs == 0 {
            return bad("this method needs at least one attention epoch");
        }
        match (self.task, self.regime) {
            (Task::Analogy, TestRegime::Regions) => return bad("analogies use the translation or scaling regime"),
            (Task::Arithmetic, TestRegime::Translation | TestRegime::Scaling) => {
                return bad("arithmetic uses the regions regime")
            }
            _ => {}
        }
        if self.method.is_regression() && self.scorer != ScorerKind::Lstm {
            return bad("the regression formulation uses the LSTM scorer");
        }
        if self.method == Method::Tcn && self.scorer != ScorerKind::Lstm {
            return bad("TCN is defined for the LSTM scorer");
        }
        if self.scorer == ScorerKind::Transformer {
            self.transformer.validate()?;
        }
        self.method.validate()
    }
}
