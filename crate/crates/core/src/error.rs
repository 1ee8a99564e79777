use std::io;

use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("index {index} out of range for {bound} classes")]
    Index { index: usize, bound: usize },

    #[error("configuration error: {0}")]
    Config(String),

    /// Training-mode batch normalization over a single value per channel.
    #[error("degenerate variance: batch norm needs more than one value per channel in training mode")]
    DegenerateVariance,

    #[error("contract violation: {0}")]
    Contract(String),

    /// A finite-difference probe crossed a non-differentiable point (ReLU or max-pool switch).
    #[error("finite-difference probe crossed a kink")]
    KinkCrossed,

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("parameter mismatch at `{name}`: {detail}")]
    ParameterMismatch { name: String, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
