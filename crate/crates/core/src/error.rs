use std::path::PathBuf;

/// Errors produced anywhere in the clustering stack.
#[derive(Debug, thiserror::Error)]
pub enum CrlcError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A value fell outside a function's mathematical domain, e.g. the log of a
    /// zero dot product between un-smoothed one-hot vectors.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("missing forward cache: call forward before backward")]
    MissingCache,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CrlcError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> CrlcError {
    CrlcError::InvalidArgument(msg.into())
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CrlcError {
    let path = path.into();
    move |source| CrlcError::Io { path, source }
}
