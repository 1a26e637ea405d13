use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },

    #[error("backward: {0}")]
    Backward(String),

    #[error("batch norm evaluated before any running-stat update: {0}")]
    BnNotCalibrated(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("unsupported maxval {0} (expected 255)")]
    UnsupportedMaxval(u32),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config digest mismatch: checkpoint {checkpoint}, config {config}")]
    DigestMismatch { checkpoint: String, config: String },

    #[error("empty manifest: {0}")]
    EmptyManifest(PathBuf),

    #[error("training diverged at iteration {iter}: {detail}")]
    Diverged { iter: usize, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable short identifier, used in CLI diagnostics and FFI error codes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config(_) => "config",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::Backward(_) => "backward",
            Error::BnNotCalibrated(_) => "bn_not_calibrated",
            Error::MalformedHeader(_) => "malformed_header",
            Error::UnsupportedMaxval(_) => "unsupported_maxval",
            Error::Truncated { .. } => "truncated",
            Error::Checkpoint(_) => "checkpoint",
            Error::DigestMismatch { .. } => "digest_mismatch",
            Error::EmptyManifest(_) => "empty_manifest",
            Error::Diverged { .. } => "diverged",
            Error::Io { .. } => "io",
        }
    }
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
