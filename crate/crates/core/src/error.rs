use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("spherical-harmonic order must be even, got {0}")]
    OddOrder(usize),

    #[error("vector is not unit length (norm {0})")]
    NotUnit(f64),

    #[error("normal equations are rank deficient; use a positive regularization weight")]
    RankDeficient,

    #[error("{needed} coefficients cannot be fit from {available} directions; lower the order")]
    TooFewDirections { needed: usize, available: usize },

    #[error("directions {0} and {1} coincide (mod antipode)")]
    CoincidentDirections(usize, usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
