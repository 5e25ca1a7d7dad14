use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GrappaError>;

#[derive(Debug, Error)]
pub enum GrappaError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite activation at layer {layer}: {what}")]
    NonFinite { layer: usize, what: String },

    #[error("training diverged: loss became non-finite at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("undefined cosine: {0} has zero norm")]
    ZeroNorm(String),

    #[error("missing prerequisite artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl GrappaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GrappaError::Io {
            path: path.into(),
            source,
        }
    }
}
