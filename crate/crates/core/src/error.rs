use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every layer of the laboratory.
///
/// Each variant maps onto a stable machine-readable class (see [`Error::class`])
/// which the command line prints on failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("context overflow: {0}")]
    Length(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("missing dependency artifact: {}", .0.display())]
    Dependency(PathBuf),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Validation(_) => "validation",
            Error::Training(_) => "training",
            Error::Length(_) => "length",
            Error::UndefinedMetric(_) => "undefined-metric",
            Error::InsufficientData(_) => "insufficient-data",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Format(_) => "format",
            Error::Dependency(_) => "dependency",
            Error::Usage(_) => "usage",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
