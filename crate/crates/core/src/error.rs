use thiserror::Error;

/// Errors produced by the flow-matching library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("integration diverged at step {step} (t = {t}): non-finite field value")]
    IntegrationDiverged { step: usize, t: f64 },

    #[error("rank-deficient data: numerical rank {rank} is below the requested latent dimension {required}")]
    RankDeficient { rank: usize, required: usize },

    #[error("numerical underflow: {0}")]
    NumericalUnderflow(String),

    #[error("unsupported metric: {0}")]
    UnsupportedMetric(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
