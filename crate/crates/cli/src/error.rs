use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config key `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("unknown dtype tag {0}")]
    DType(u8),
    #[error("truncated file: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("report: {0}")]
    Report(String),
    #[error("image: {0}")]
    Image(String),
    #[error(transparent)]
    Core(#[from] cost_core::Error),
    #[error(transparent)]
    Tensor(#[from] cost_tensor::TensorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "config",
            CliError::Io { .. } => "io",
            CliError::BadMagic { .. } | CliError::Version(_) | CliError::DType(_) | CliError::Truncated { .. } => {
                "format"
            }
            CliError::Crc { .. } => "crc",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::MissingCheckpoint(_) => "missing_checkpoint",
            CliError::Report(_) => "report",
            CliError::Image(_) => "image",
            CliError::Core(_) | CliError::Tensor(_) => "compute",
            CliError::Json(_) => "json",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
