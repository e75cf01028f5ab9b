//! Crate-wide error type with a coarse taxonomy: schema/parse errors for
//! files, argument errors for bad configuration, numerical errors for
//! failures inside algorithms. The CLI maps the first three groups to exit
//! code 2 and numerical failures to exit code 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A record in an input file has the wrong shape.
    #[error("schema error in {path} row {row}: expected {expected} value fields, found {found}")]
    Schema {
        path: String,
        row: usize,
        expected: usize,
        found: usize,
    },

    /// A field in an input file could not be interpreted.
    #[error("parse error in {path} row {row}: {message}")]
    Parse {
        path: String,
        row: usize,
        message: String,
    },

    /// An argument or configuration value is out of range or inconsistent.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A numerical failure: non-finite values, a factorization that broke
    /// down, an iteration that diverged.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Convenience for `Error::Argument` with formatted content.
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    /// Convenience for `Error::Numerical` with formatted content.
    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
