use std::path::PathBuf;

/// Errors produced anywhere in the stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{what} out of range: {value}")]
    Range { what: &'static str, value: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error at {location}: {detail}")]
    Numeric { location: String, detail: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("integrity error at seq {seq}: {detail}")]
    Integrity { seq: u64, detail: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("state error: {0}")]
    State(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("storage error at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("undefined score: {0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn range(what: &'static str, value: impl ToString) -> Self {
        Error::Range {
            what,
            value: value.to_string(),
        }
    }

    pub(crate) fn shape(expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Self {
        Error::Shape {
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }

    pub(crate) fn storage(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Storage {
            path: path.into(),
            source,
        }
    }
}
