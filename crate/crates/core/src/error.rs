use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate attention row {row}: every key is masked")]
    DegenerateRow { row: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index {index} out of range 1..={max}")]
    Index { index: usize, max: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("finite-difference oracle is invalid: {0}")]
    OracleInvalid(String),

    #[error("training diverged at step {step} (seed {seed}): loss = {loss}")]
    Training { step: usize, seed: u64, loss: f64 },

    #[error("frozen parameter `{0}` changed during fine-tuning")]
    FrozenViolation(String),

    #[error("unknown condition id {0}")]
    Lookup(usize),

    #[error("scene spec error: {0}")]
    Spec(String),

    #[error("flow needs at least two frames, got {0}")]
    InsufficientFrames(usize),

    #[error("alignment score undefined: union is empty on every frame")]
    UndefinedScore,

    #[error("optical flow parameter error: {0}")]
    FlowParams(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("no input: {0}")]
    NoInput(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable numeric category, shared by the command-line exit status and
    /// the C interface.
    pub fn code(&self) -> i32 {
        match self {
            Error::Dimension(_) | Error::Index { .. } => 2,
            Error::Config(_) | Error::FlowParams(_) | Error::Spec(_) | Error::Lookup(_) => 3,
            Error::DegenerateRow { .. } | Error::NonFinite(_) | Error::Training { .. } => 4,
            Error::Contract(_) | Error::FrozenViolation(_) | Error::OracleInvalid(_) => 5,
            Error::InsufficientFrames(_) | Error::UndefinedScore | Error::NoInput(_) => 6,
            Error::Format { .. } | Error::Json(_) => 7,
            Error::Io { .. } => 8,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}
