use thiserror::Error;

/// Errors surfaced by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("unresolvable prompt {prompt:?}: missing {missing}")]
    UnresolvablePrompt { prompt: String, missing: String },

    #[error("training failure at step {step}: {reason}")]
    TrainingFailure { step: usize, reason: String },

    #[error("sampling {prompt:?} failed: {source}")]
    Sampling { prompt: String, source: Box<Error> },

    #[error("clip has no foreground pixels")]
    EmptyClip,

    #[error("gradient check failed for {family}: max relative error {error:.3e} > {tolerance:.1e}")]
    CheckFailure {
        family: String,
        error: f64,
        tolerance: f64,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing prerequisite stage `{stage}`: {detail}")]
    Dependency { stage: String, detail: String },

    #[error("invalid length {got}: allowed lengths are {allowed:?}")]
    InvalidLength { got: usize, allowed: Vec<usize> },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
