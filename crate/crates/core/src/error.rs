use std::path::PathBuf;

use thiserror::Error;

/// Failures raised while building or differentiating a computation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid shape {0:?}: dimensions must be positive")]
    InvalidShape(Vec<usize>),
    #[error("{op}: numeric domain error: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable does not belong to an active computation record")]
    NoActiveRecord,
    #[error("{0}")]
    InvalidArgument(String),
}

/// A parse failure in one of the text or binary input formats.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{source_name}:{line}: {message}")]
pub struct ParseError {
    pub source_name: String,
    pub line: usize,
    pub message: String,
}

impl ParseError {
    pub fn new(source_name: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Self {
            source_name: source_name.into(),
            line,
            message: message.into(),
        }
    }
}

/// Crate-level error.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown key `{key}` in section [{section}]{}", suggestion.as_ref().map(|s| format!(" (did you mean `{s}`?)")).unwrap_or_default())]
    UnknownKey {
        section: String,
        key: String,
        suggestion: Option<String>,
    },
    #[error("dataset error: {0}")]
    Data(String),
    #[error("non-finite {loss} loss in phase {phase} (epoch {epoch}, batch {batch})")]
    NonFinite {
        phase: &'static str,
        loss: &'static str,
        epoch: usize,
        batch: usize,
    },
    #[error("missing gradient for parameter {0}")]
    MissingGradient(usize),
    #[error("fold {fold}: {source}")]
    Fold {
        fold: String,
        #[source]
        source: Box<Error>,
    },
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
    #[error("metrics error: {0}")]
    Metrics(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
