use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = StataError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum StataError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed EMB1 data: {0}")]
    Format(String),

    #[error("unsupported dtype {0:?}, expected \"f32\" or \"f64\"")]
    Dtype(String),

    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("zero-norm row {row}")]
    ZeroNorm { row: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label line {line}: {msg}")]
    Label { line: usize, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infinite KL term: zero-shot probability of class {class} is 0 for sample {row} but its assignment is positive")]
    InfiniteKl { row: usize, class: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("empty scenario")]
    EmptyScenario,

    #[error("scenario: {0}")]
    Scenario(String),

    #[error("cannot place {k} centers in {d} dimensions at separation {separation}")]
    CenterPlacement { k: usize, d: usize, separation: f64 },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl StataError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        StataError::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        StataError::Config(msg.into())
    }

    /// True for errors caused by the caller's parameters rather than the data.
    pub fn is_usage(&self) -> bool {
        matches!(self, StataError::Config(_))
    }
}
