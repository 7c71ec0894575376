use thiserror::Error;

use crate::store::ExpertKey;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("layer {layer} out of range ({n_layers} layers)")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    #[error("unknown expert {0}")]
    UnknownExpert(ExpertKey),

    #[error("expert {0} could not be resolved to weights")]
    MissingWeights(ExpertKey),

    #[error("speculative load of {requested} keys exceeds {capacity} staging buffers")]
    StagingCapacity { requested: usize, capacity: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f32 },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("trace has no hidden states; speculative replay needs them")]
    NoHiddenStates,

    #[error("trace does not match configuration: {0}")]
    TraceMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
