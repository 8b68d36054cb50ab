use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("numerical divergence at step {step}: {context}")]
    Divergence { step: usize, context: String },
    #[error("resource limit exceeded: {0}")]
    Resource(String),
    #[error("training diverged at step {step} (loss {loss})")]
    TrainingDivergence { step: usize, loss: f64 },
    #[error("incompatible weights: {0}")]
    IncompatibleWeights(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(expected: impl core::fmt::Display, got: impl core::fmt::Display) -> Self {
        use alloc::string::ToString;
        Error::ShapeMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
