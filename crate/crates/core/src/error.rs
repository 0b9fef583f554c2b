//! Error and result types shared across the crate.

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed or unsupported NIfTI file.
    #[error("NIfTI error: {0}")]
    Nifti(String),

    /// Voxel data violates an invariant (NaN/Inf, bad label id, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Grids that are required to share shape/spacing/affine do not.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// Invalid configuration (missing modality, bad ranges, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor shape mismatch (channels, patch divisibility, ...).
    #[error("shape error: {0}")]
    Shape(String),

    /// Probability volumes that cannot be fused.
    #[error("fusion error: {0}")]
    Fusion(String),

    /// Phantom generation could not satisfy its spec.
    #[error("generation error: {0}")]
    Generation(String),

    /// Training aborted (NaN loss, empty item list, ...).
    #[error("training error: {0}")]
    Train(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
