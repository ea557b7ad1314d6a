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

    #[error("raster error on {path}: {message}")]
    Raster { path: PathBuf, message: String },

    #[error("manifest {path}, line {line}: field `{field}`: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },

    #[error("duplicate slide id `{0}`")]
    DuplicateSlide(String),

    #[error("dimension mismatch for `{what}`: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        what: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("invalid config: `{field}` {constraint}")]
    Config { field: String, constraint: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("class id {id} out of range for {n_classes} classes")]
    ClassOutOfRange { id: u8, n_classes: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing prerequisite {artifact}; run `{command}` first")]
    MissingPrerequisite { artifact: PathBuf, command: String },

    #[error("{0}")]
    Runtime(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, constraint: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            constraint: constraint.into(),
        }
    }
}
