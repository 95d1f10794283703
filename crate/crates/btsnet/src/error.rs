use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by configuration, data ingestion and the harness.
///
/// Shape and rank violations inside the compute graph are programming
/// errors and panic instead; everything a caller can plausibly trigger
/// from configs or on-disk data goes through this enum.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("normalization error: {0}")]
    Normalization(String),

    #[error("checkpoint incompatible with model: {0}")]
    CheckpointMismatch(String),

    #[error("dataset error at {path}: {message}")]
    Dataset { path: PathBuf, message: String },

    #[error("{count} item(s) failed:\n{report}")]
    Itemized { count: usize, report: String },

    #[error("training diverged: {0}")]
    NonFiniteLoss(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
