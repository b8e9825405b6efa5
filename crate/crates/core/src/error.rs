use std::path::PathBuf;

/// Errors raised by the goal-consistency pipeline.
///
/// The variants are grouped so that a command-line front end can map them
/// onto distinct exit codes: configuration problems, data problems and
/// failed numerical checks.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("record {index}: {message}")]
    Record { index: usize, message: String },

    #[error("degenerate co-occurrence column for action {action}: no training example carries it")]
    DegenerateColumn { action: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed binary file: {0}")]
    Format(String),

    #[error("numerical check failed: {0}")]
    Check(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            actual,
        }
    }
}
