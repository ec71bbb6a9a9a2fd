use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("model file not found: {0}")]
    ModelNotFound(PathBuf),

    #[error("cannot parse model {path}: {reason}")]
    ModelFormat { path: PathBuf, reason: String },

    #[error("model is unusable: {0}")]
    InvalidModel(String),

    #[error("inference failed: {0}")]
    Inference(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("layer `{0}` has no spatial activation map")]
    NonSpatialLayer(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("feature masks do not partition the pixel grid: {0}")]
    Partition(String),

    #[error("cannot read image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serialization(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures originating in the classifier (loading or running it).
    /// A missing model file and bad layer names count as configuration errors.
    pub fn is_model_error(&self) -> bool {
        matches!(
            self,
            Error::ModelFormat { .. } | Error::InvalidModel(_) | Error::Inference(_)
        )
    }
}
