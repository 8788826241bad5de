//! Crate-wide error type and result alias.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor rank/shape violations, with the offending axes spelled out.
    #[error("shape mismatch in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    /// API contract violations (bad argument ranges, out-of-order calls).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values detected by checked mode, or other numeric failures.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Corpus / clip / depth ingestion problems.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint serialization or lookup problems.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Error category used for CLI exit codes.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            Error::Data(_) | Error::Image(_) | Error::Json(_) => ErrorCategory::Data,
            Error::Checkpoint(_) => ErrorCategory::Checkpoint,
            Error::Numeric(_) => ErrorCategory::Numeric,
            _ => ErrorCategory::Other,
        }
    }

    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape { op, msg: msg.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Checkpoint,
    Numeric,
    Other,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Checkpoint => 4,
            ErrorCategory::Numeric => 5,
            ErrorCategory::Other => 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Data => "data",
            ErrorCategory::Checkpoint => "checkpoint",
            ErrorCategory::Numeric => "numeric",
            ErrorCategory::Other => "internal",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
