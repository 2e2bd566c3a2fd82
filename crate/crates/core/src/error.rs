use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("insufficient samples: needed at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("masking failed for sample {index}: {reason}")]
    Masking { index: usize, reason: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("training diverged at round {round}: {reason}")]
    Divergence { round: usize, reason: String },

    #[error("structure cannot separate a batch of {batch} samples with {units} units")]
    Unseparable { batch: usize, units: usize },

    #[error("unknown user {0}")]
    UnknownUser(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
