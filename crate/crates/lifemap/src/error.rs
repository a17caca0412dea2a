//! Crate-wide error type.

use std::path::PathBuf;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input does not carry enough structure for the operation
    /// (fewer than 3 points for a plane fit, collinear hull input, ...).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A point with NaN/Inf coordinates, or mismatched label count.
    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),

    #[error("parse error in {path} at line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    /// Every candidate of the alignment grid failed; the per-candidate log
    /// tells which stage rejected each one.
    #[error("alignment failed: no grid candidate succeeded ({coarse_failures} coarse failures, {fine_failures} fine failures)")]
    AlignmentFailed {
        coarse_failures: usize,
        fine_failures: usize,
    },

    /// BEV images compared without a shared grid frame.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("store already exists at {0}")]
    StoreExists(PathBuf),

    #[error("no such session: {0}")]
    NoSuchSession(usize),

    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(PathBuf),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{msg}: {source}")]
    Io {
        msg: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(msg: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            msg: msg.into(),
            source,
        }
    }
}
