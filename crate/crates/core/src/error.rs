//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

/// Unified error for every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum DmhError {
    /// Invalid parameter values or malformed configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed, inconsistent, or unreadable data (datasets, models,
    /// code files, reports).
    #[error("data error: {0}")]
    Data(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Dimension mismatch between arrays that must agree.
    #[error("shape error: expected {expected}, got {got} ({context})")]
    Shape {
        expected: String,
        got: String,
        context: String,
    },

    /// Numerical failure: non-finite values, singular systems,
    /// degenerate similarity inputs.
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl DmhError {
    /// Shortcut for [`DmhError::Shape`].
    pub fn shape(expected: impl Into<String>, got: impl Into<String>, context: impl Into<String>) -> Self {
        DmhError::Shape {
            expected: expected.into(),
            got: got.into(),
            context: context.into(),
        }
    }

    /// Process exit code the CLI reports for this error: 1 for usage /
    /// configuration problems, 2 for data problems, 3 for numerical
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            DmhError::Config(_) => 1,
            DmhError::Data(_) | DmhError::Io(_) | DmhError::Shape { .. } => 2,
            DmhError::Numeric(_) => 3,
        }
    }
}

impl From<serde_json::Error> for DmhError {
    fn from(e: serde_json::Error) -> Self {
        DmhError::Data(format!("json: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, DmhError>;
