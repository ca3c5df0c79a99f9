use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ChmmError> = std::result::Result<T, E>;

/// A single rejected input row, reported with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowIssue {
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for RowIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ChmmError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid state {state} for chain {chain} (expected < {num_states})")]
    InvalidState {
        chain: usize,
        state: usize,
        num_states: usize,
    },

    #[error("unsupported dimension: {0}")]
    UnsupportedDimension(String),

    #[error("non-finite log target for chain {chain}: {value}")]
    NonFiniteLogTarget { chain: usize, value: f64 },

    #[error("forward messages underflowed for chain {chain}, patient {patient}, month {month}")]
    NumericalUnderflow {
        chain: usize,
        patient: usize,
        month: usize,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("size guardrail exceeded: {what} = {size} (limit {limit})")]
    SizeLimit {
        what: &'static str,
        size: u128,
        limit: u128,
    },

    #[error("input rejected:\n{}", format_issues(.0))]
    Ingest(Vec<RowIssue>),

    #[error("posterior sets have {left} and {right} draws; enable resampling to pair them")]
    MismatchedDraws { left: usize, right: usize },

    #[error("unknown site `{0}`")]
    UnknownSite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("malformed posterior file {path}: {message}")]
    MalformedPosterior { path: PathBuf, message: String },
}

fn format_issues(issues: &[RowIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("  {i}"))
        .collect::<Vec<_>>()
        .join("\n")
}

impl ChmmError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ChmmError::Io {
            path: path.into(),
            source,
        }
    }
}
