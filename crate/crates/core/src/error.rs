use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("length error: {0}")]
    Length(String),

    #[error("state error: {0}")]
    State(String),

    #[error("decode error: token id {id} is outside the vocabulary of {vocab_size}")]
    Decode { id: u32, vocab_size: usize },

    #[error("format error in `{tensor}`: {reason}")]
    Format { tensor: String, reason: String },

    #[error("invalid intervention spec: {0}")]
    Spec(String),

    #[error("range error: value {value} at {location} is outside [{lo}, {hi}]")]
    Range {
        value: f64,
        location: String,
        lo: f64,
        hi: f64,
    },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(tensor: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            tensor: tensor.into(),
            reason: reason.into(),
        }
    }
}
