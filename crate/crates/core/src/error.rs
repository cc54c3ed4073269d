use std::path::PathBuf;

/// Errors produced anywhere in the extraction pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("measurement error: {0}")]
    Measurement(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("scene too short: {len} samples, need at least {min}")]
    TooShort { len: usize, min: usize },

    #[error("non-finite loss at step {step} (batch seed {batch_seed})")]
    NonFinite { step: u64, batch_seed: u64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("sample rate {found} Hz not supported, expected {expected} Hz")]
    SampleRate { found: u32, expected: u32 },

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Process exit status: 1 usage/config, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::NonFinite { .. } | Error::Measurement(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
