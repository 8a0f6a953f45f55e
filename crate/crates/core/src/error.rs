use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can surface. Each variant maps onto a stable
/// short code (see [`Error::code`]) used by the CLI exit line and the C ABI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("attention row {row} has no allowed entry")]
    DegenerateRow { row: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("invalid state: {0}")]
    State(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid segments: {0}")]
    Segments(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("malformed weight file: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "E_SHAPE",
            Error::DegenerateRow { .. } => "E_DEGENERATE_ROW",
            Error::NonFinite(_) => "E_NON_FINITE",
            Error::State(_) => "E_STATE",
            Error::Config(_) => "E_CONFIG",
            Error::Segments(_) => "E_SEGMENTS",
            Error::Invalid(_) => "E_INVALID",
            Error::Diverged { .. } => "E_DIVERGED",
            Error::Format(_) => "E_FORMAT",
            Error::Io { .. } => "E_IO",
            Error::Json(_) => "E_JSON",
            Error::Csv(_) => "E_CSV",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
