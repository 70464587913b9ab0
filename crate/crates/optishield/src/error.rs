//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or image dimensions do not match what an operation expects.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A sensor geometry that cannot be realized (non-positive output size,
    /// kernel larger than the padded input, ...).
    #[error("invalid geometry: {0}")]
    Geometry(String),

    /// Invalid run configuration (bad hyperparameter, unknown backbone, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Corpus loading / generation problems.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Unknown or unsupported file format.
    #[error("unsupported format: {0}")]
    Format(String),

    /// An artifact failed a checksum or fingerprint check.
    #[error("artifact integrity: {0}")]
    Integrity(String),

    /// A training loss became non-finite; the run was aborted.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
