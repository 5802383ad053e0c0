use thiserror::Error;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("signal too short: {samples} samples, need at least {needed}")]
    TooShort { samples: usize, needed: usize },

    #[error("empty feature matrix")]
    EmptyFeatures,

    #[error("feature cache: {0}")]
    Cache(String),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DspError>;
