use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} failed after jitter)")]
    NotPositiveDefinite { pivot: usize },

    #[error("matrix is not symmetric: |m[{row}][{col}] - m[{col}][{row}]| = {gap:e}")]
    NotSymmetric { row: usize, col: usize, gap: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("invalid block structure: {0}")]
    InvalidStructure(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite responsibility logit for sample {sample}, group {group}")]
    NonFiniteLogit { sample: usize, group: usize },

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("estimated and true group counts differ ({estimated} vs {truth})")]
    GroupCountMismatch { estimated: usize, truth: usize },

    #[error("AUC needs both positive and negative labels")]
    DegenerateLabels,

    #[error("true variance vector is identically zero")]
    ZeroTruth,

    #[error("dataset has no ground truth")]
    MissingGroundTruth,

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        Error::AtIteration {
            iteration,
            source: Box::new(self),
        }
    }

    /// True for failures that come from the numerics rather than from the
    /// caller's input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NotPositiveDefinite { .. }
            | Error::NotSymmetric { .. }
            | Error::NonFiniteLogit { .. }
            | Error::Domain(_) => true,
            Error::AtIteration { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
