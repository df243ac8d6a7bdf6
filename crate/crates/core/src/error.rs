//! Error type shared by every module in the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Matrix dimensions do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A scalar or count argument is outside its admissible range.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// An input violates a documented contract (e.g. rows not stochastic).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A file or byte stream does not parse as the expected format.
    #[error("malformed input: {0}")]
    Format(String),

    /// An I/O failure, annotated with the path that caused it.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Annotate an I/O failure with the path it happened on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
