//! Crate-wide error type with the CLI exit-code contract.

use std::path::Path;

use thiserror::Error;

/// Errors produced by the library. Each variant maps to a fixed process
/// exit code so scripted callers can branch on failure class.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent inputs: bad headers, broken invariants,
    /// out-of-range values, schema violations.
    #[error("validation error: {0}")]
    Validation(String),

    /// Filesystem or network failure.
    #[error("i/o error: {0}")]
    Io(String),

    /// Numerical failure: non-finite loss, degenerate linear algebra.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    /// Exit code for the CLI: 2 validation, 3 I/O, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) => 2,
            Error::Io(_) => 3,
            Error::Numerical(_) => 4,
        }
    }

    pub fn io_at(path: &Path, err: std::io::Error) -> Self {
        Error::Io(format!("{}: {}", path.display(), err))
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
