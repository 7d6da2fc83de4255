//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("rank {rank} out of range (valid 1..={max})")]
    RankOutOfRange { rank: usize, max: usize },

    #[error("matrix is not symmetric (max asymmetry {max_asym:e} exceeds {tol:e})")]
    NotSymmetric { max_asym: f64, tol: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("missing tensor '{0}' in weight container")]
    MissingTensor(String),

    #[error("tensor '{tensor}' has unsupported dtype '{dtype}'")]
    UnsupportedDtype { tensor: String, dtype: String },

    #[error("tensor '{tensor}' shape mismatch: expected {expected:?}, got {got:?}")]
    TensorShape {
        tensor: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("malformed weight container: {0}")]
    MalformedContainer(String),

    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("empty calibration buffer")]
    EmptyCalibration,

    #[error("transition {0} is undefined (zero error norm)")]
    UndefinedTransition(usize),

    #[error("rank correlation undefined: {0}")]
    DegenerateCorrelation(String),

    #[error("invalid ablation target: {0}")]
    InvalidTarget(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn dims(
        context: impl Into<String>,
        expected: impl Into<String>,
        got: impl Into<String>,
    ) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }
}
