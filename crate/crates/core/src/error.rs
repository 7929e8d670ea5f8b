use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("input too short: need at least {needed} samples, got {got}")]
    InputTooShort { needed: usize, got: usize },

    #[error("sample rate mismatch: expected {expected} Hz, got {got} Hz")]
    SampleRateMismatch { expected: u32, got: u32 },

    #[error("unsupported sample rate {0} Hz")]
    UnsupportedSampleRate(u32),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing asset `{0}`")]
    MissingAsset(String),

    #[error("missing artifact from stage `{stage}`: {path}")]
    MissingArtifact { stage: String, path: PathBuf },

    #[error("ODE diverged at step {step}")]
    OdeDiverged { step: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint component mismatch: expected `{expected}`, found `{found}`")]
    ComponentMismatch { expected: String, found: String },

    #[error("checkpoint format version {found} is not supported (expected {expected}); re-export with this build")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
