use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("point ({x}, {y}) lies outside the coverage square [0, {extent})^2")]
    OutOfCoverage { x: i64, y: i64, extent: u32 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("objective diverged at step {step}: last finite values {trace:?}")]
    Divergence { step: usize, trace: Vec<f64> },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("requested {requested} distinct problems but only {available} exist")]
    Infeasible { requested: usize, available: usize },

    #[error("rejection budget of {budget} draws exceeded ({accepted} accepted, acceptance rate {rate:.3e})")]
    RejectionBudget { budget: u64, accepted: u64, rate: f64 },

    #[error("artifact error: {0}")]
    Artifact(String),

    #[error("hash mismatch for {what}: expected {expected}, found {found}")]
    HashMismatch { what: String, expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier used in machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::OutOfCoverage { .. } => "out_of_coverage",
            Error::Numerical(_) => "numerical",
            Error::Divergence { .. } => "divergence",
            Error::Empty(_) => "empty_input",
            Error::Shape(_) => "shape_mismatch",
            Error::Infeasible { .. } => "infeasible_counts",
            Error::RejectionBudget { .. } => "rejection_budget",
            Error::Artifact(_) => "artifact",
            Error::HashMismatch { .. } => "hash_mismatch",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
