use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("{op}: index {index} out of range (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("input too short: need {needed} samples, got {got}")]
    InputTooShort { needed: usize, got: usize },

    #[error("format error in `{field}`: {detail}")]
    Format { field: String, detail: String },

    #[error("configuration error at `{path}`: {detail}")]
    Config { path: String, detail: String },

    #[error("pretraining failed: source validation accuracy {accuracy:.3} below {floor:.2}")]
    PretrainingFailed { accuracy: f64, floor: f64 },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (grad norm {grad_norm:.3e})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        grad_norm: f64,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status for this failure: 2 numeric, 3 I/O, 4 config,
    /// schema or input data, 1 for internal faults.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) | Error::PretrainingFailed { .. } | Error::NonFiniteLoss { .. } => 2,
            Error::Io { .. } => 3,
            Error::Usage(_)
            | Error::Config { .. }
            | Error::Format { .. }
            | Error::Json(_)
            | Error::EmptyInput(_)
            | Error::InputTooShort { .. } => 4,
            Error::Dimension { .. } | Error::Index { .. } | Error::Contract(_) => 1,
        }
    }

    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub fn format(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
