use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("malformed array file {path}: {reason}")]
    ArrayFormat { path: PathBuf, reason: String },

    #[error("view {view}, array `{array}`: {reason}")]
    InvalidArray {
        view: usize,
        array: String,
        reason: String,
    },

    #[error("view {view}, camera: {reason}")]
    InvalidCamera { view: usize, reason: String },

    #[error("invalid bundle: {0}")]
    InvalidBundle(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("denoiser failure: {0}")]
    Denoiser(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid_array(view: usize, array: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidArray {
            view,
            array: array.into(),
            reason: reason.into(),
        }
    }
}
