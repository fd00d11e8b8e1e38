use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A document whose structure does not match its schema (unknown key,
    /// wrong type, malformed syntax).
    #[error("schema violation: {0}")]
    Schema(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("loss undefined: {0}")]
    UndefinedLoss(String),

    #[error("weight transfer failed for tensor `{tensor}`: {reason}")]
    Transfer { tensor: String, reason: String },

    #[error("parse error at byte offset {offset}: {reason}")]
    Parse { offset: u64, reason: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("missing predictions for {} image(s): {}", .0.len(), .0.join(", "))]
    MissingPredictions(Vec<String>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line driver.
    ///
    /// 2 config, 3 data, 4 integrity (including schema violations), 5 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_)
            | Error::MissingPredictions(_)
            | Error::Io { .. }
            | Error::Image { .. }
            | Error::InvalidInput(_) => 3,
            Error::Integrity(_) | Error::Schema(_) | Error::Parse { .. } | Error::Transfer { .. } => 4,
            Error::UndefinedLoss(_) | Error::Json(_) => 5,
        }
    }

    /// Short machine-readable category name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::Config(_) => "config",
            Error::Schema(_) => "schema",
            Error::Data(_) => "data",
            Error::UndefinedLoss(_) => "undefined_loss",
            Error::Transfer { .. } => "transfer",
            Error::Parse { .. } => "parse",
            Error::Integrity(_) => "integrity",
            Error::MissingPredictions(_) => "missing_predictions",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Json(_) => "json",
        }
    }
}
