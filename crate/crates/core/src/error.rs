//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by schedule construction, oracle evaluation, model
/// training, and sampling.
#[derive(Debug, Error)]
pub enum Error {
    /// A constructor or operation received an argument outside its domain.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Vector or matrix shapes do not line up.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A step or component index fell outside its valid range.
    #[error("index {index} out of range 1..={max}")]
    IndexOutOfRange { index: usize, max: usize },

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },

    /// A drift or guidance term evaluated to a non-finite value.
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    /// Checkpoint or schedule deserialization failed.
    #[error("serialization: {0}")]
    Serialization(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
