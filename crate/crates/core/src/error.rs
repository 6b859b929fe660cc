use std::path::PathBuf;

use crate::searchspace::Violation;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("{op}: incompatible shapes {detail}")]
    Shape { op: &'static str, detail: String },

    /// An operation was called outside its documented domain.
    #[error("{op}: {detail}")]
    Precondition { op: &'static str, detail: String },

    #[error("invalid head config: {}", format_violations(.0))]
    InvalidConfig(Vec<Violation>),

    /// Empty splits, malformed rows, unknown task names.
    #[error("data error: {0}")]
    Data(String),

    #[error("insufficient observations: need {needed}, have {have}")]
    InsufficientData { needed: usize, have: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn precondition(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Precondition {
            op,
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

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
