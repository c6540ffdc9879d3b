use serde::{Deserialize, Serialize};

/// One rejected field in a validation error.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub name: String,
    pub reason: String,
}

impl FieldError {
    pub fn new(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("validation failed: {}", summarize(.0))]
    Validation(Vec<FieldError>),
    #[error("missing input artifact {0}")]
    MissingInput(String),
    #[error("integrity check failed for {0}")]
    Integrity(String),
    #[error("parse error at {0}")]
    Parse(String),
    #[error("lease lost on task {0}")]
    LeaseLost(String),
    #[error("selection is empty")]
    EmptySelection,
    #[error("features incomplete for packages: {}", .0.join(", "))]
    IncompleteFeatures(Vec<String>),
    #[error("merge group {0} matches no rows")]
    EmptyGroup(String),
    #[error("chain step {0} matches no columns")]
    EmptyTarget(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("diverged at epoch {0}")]
    Diverged(usize),
    #[error("fetch failed: {0}")]
    Fetch(String),
    #[error("task cancelled")]
    Cancelled,
    #[error("task {0} failed: {1}")]
    TaskFailed(String, String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn summarize(errors: &[FieldError]) -> String {
    errors
        .iter()
        .map(|e| format!("{}: {}", e.name, e.reason))
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    /// Stable machine-readable code for this error.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::NotFound(_) => "not-found",
            Error::Conflict(_) => "conflict",
            Error::Validation(_) => "validation-error",
            Error::MissingInput(_) => "missing-input",
            Error::Integrity(_) => "integrity-error",
            Error::Parse(_) => "parse-error",
            Error::LeaseLost(_) => "lease-lost",
            Error::EmptySelection => "empty-selection",
            Error::IncompleteFeatures(_) => "incomplete-features",
            Error::EmptyGroup(_) => "empty-group",
            Error::EmptyTarget(_) => "empty-target",
            Error::Unsupported(_) => "unsupported",
            Error::Diverged(_) => "diverged",
            Error::Fetch(_) => "fetch-error",
            Error::Cancelled => "cancelled",
            Error::TaskFailed(..) => "task-failed",
            Error::Io(_) => "io-error",
        }
    }

    /// Whether a task failing with this error should be retried.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Fetch(_) | Error::Io(_))
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn not_found(what: impl Into<String>) -> Self {
        Error::NotFound(what.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<zip::result::ZipError> for Error {
    fn from(e: zip::result::ZipError) -> Self {
        Error::Parse(format!("zip: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
