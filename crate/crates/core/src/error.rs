use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to read NIfTI file {path}: {message}")]
    Nifti { path: PathBuf, message: String },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid label value {value} at voxel {index} (scheme has {num_classes} classes)")]
    InvalidLabel {
        value: f32,
        index: usize,
        num_classes: usize,
    },

    #[error("operation requires a {expected} volume")]
    WrongKind { expected: &'static str },

    #[error("singular transform")]
    SingularTransform,

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("patch sampling failed: {0}")]
    Sampling(String),

    #[error("stitching failed: {0}")]
    Stitch(String),

    #[error("phantom specification invalid: {0}")]
    Phantom(String),

    #[error("statistics undefined: {0}")]
    Statistics(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
