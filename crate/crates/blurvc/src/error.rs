//! Crate-wide error type and the process exit codes derived from it.

use std::path::PathBuf;

/// Errors surfaced by library operations.
///
/// Internal contract violations (mismatched tensor shapes produced by our own
/// code, out-of-range graph ids, ...) panic instead: they are bugs, not
/// runtime conditions a caller can handle.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid arguments or configuration supplied by the caller.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Filesystem trouble, annotated with the path that failed.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A byte stream (container, checkpoint, manifest) failed to parse.
    #[error("format error: {0}")]
    Format(String),

    /// A container references a model that does not match the loaded checkpoint.
    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    /// Training produced a non-finite loss and was aborted.
    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Divergence { iteration: u64, loss: f64 },
}

impl Error {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error when it escapes the CLI.
    ///
    /// 2 = usage, 3 = I/O, 4 = malformed or mismatched model/container,
    /// 5 = training divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) => 2,
            Error::Io { .. } => 3,
            Error::Format(_) | Error::ModelMismatch(_) => 4,
            Error::Divergence { .. } => 5,
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
