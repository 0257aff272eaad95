use std::path::PathBuf;

use thiserror::Error;

/// Error type shared across the crate.
///
/// Variants map onto the CLI's exit-code classes: `Io`/`Image` are I/O
/// failures, `Check` is a verification failure (gradcheck, receptive-field
/// contract), everything else is a validation or configuration problem.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dim(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("degenerate hull: {0}")]
    DegenerateHull(String),

    #[error("non-finite values produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("check failed: {0}")]
    Check(String),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for the I/O class of failures (CLI exit code 2).
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Image { .. })
    }

    /// True for check failures (CLI exit code 3).
    pub fn is_check(&self) -> bool {
        matches!(self, Error::Check(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
