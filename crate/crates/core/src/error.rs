use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Variants are grouped by the exit code the CLI maps them to: configuration
/// and usage problems, data/format problems, and numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("dimension mismatch at layer {layer}: expected {expected} columns, got {got}")]
    LayerDimension {
        layer: usize,
        expected: usize,
        got: usize,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("ingestion error at row {row}, column {column:?}: {message}")]
    Ingestion {
        row: usize,
        column: String,
        message: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("schema fingerprint mismatch: {0}")]
    FingerprintMismatch(String),

    #[error("missing artifact {path}: run `{command}` first")]
    MissingArtifact { path: PathBuf, command: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 configuration, 3 data/format, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Usage(_)
            | Error::FingerprintMismatch(_)
            | Error::MissingArtifact { .. } => 2,
            Error::LayerDimension { .. }
            | Error::Dimension(_)
            | Error::Ingestion { .. }
            | Error::Format(_)
            | Error::UndefinedMetric(_)
            | Error::Io { .. }
            | Error::Csv(_)
            | Error::Json(_) => 3,
            Error::NonFiniteGradient(_) | Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
