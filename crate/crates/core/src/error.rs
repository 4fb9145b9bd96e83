//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the public API.
///
/// Numeric kernels (interval arithmetic, tensor ops) assert their own
/// preconditions instead; everything that depends on external input (files,
/// configs, model descriptions, parameter ranges) reports through this enum.
#[derive(Debug, Error)]
pub enum GeoCertError {
    /// Interval endpoints inverted or non-finite.
    #[error("invalid interval [{lo}, {hi}]")]
    InvalidInterval { lo: f64, hi: f64 },

    /// A transform parameter is outside its admissible range, a config value
    /// is out of bounds, or a transform expression failed to parse.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Tensor or layer shapes do not line up.
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    /// Malformed dataset or model file contents.
    #[error("format error: {0}")]
    Format(String),

    /// Stored model weights do not match the manifest checksum.
    #[error("checksum mismatch: manifest {expected}, blob {got}")]
    Checksum { expected: String, got: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, GeoCertError>;
