use thiserror::Error;

/// Errors produced by the numeric core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backward: {0}")]
    Backward(String),
    #[error("missing gradient for parameter(s): {}", .0.join(", "))]
    MissingGrad(Vec<String>),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Wraps the error with a context string, e.g. the epoch in which it happened.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}
