use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to read NIfTI file {path}: {source}")]
    Nifti {
        path: PathBuf,
        #[source]
        source: nifti::NiftiError,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("non-3D image: {0}")]
    NonVolumetric(String),

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid label map: {0}")]
    InvalidLabels(String),

    #[error("unknown organ name: {0}")]
    UnknownOrgan(String),

    #[error("empty foreground: {0}")]
    EmptyForeground(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid network: {0}")]
    Network(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing target for head `{0}`")]
    MissingTarget(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
