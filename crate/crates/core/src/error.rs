use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    TrainingDiverged { epoch: usize },

    #[error("{method} optimization failed at step {step}: non-finite loss")]
    Optimization { method: &'static str, step: usize },

    #[error("distribution matching failed for instance {instance}: {reason}")]
    MatchingFailed { instance: String, reason: String },

    #[error("relevance propagation has no rule for layer `{layer}`")]
    Propagation { layer: String },

    #[error("layer `{0}` is not supported here")]
    UnsupportedLayer(String),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }
}
