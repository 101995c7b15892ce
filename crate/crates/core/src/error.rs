use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// The caller violated an operation precondition.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("parse error in {path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("version error: {0}")]
    Version(String),

    /// A NaN or infinity appeared where finite values are required.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {msg}")]
    Image { path: PathBuf, msg: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
