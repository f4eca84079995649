//! Decoder-only transformer: pre-norm blocks with RMS normalization, rotary
//! multi-head causal attention and a gated (SiLU) feed-forward.

mod attention;
mod config;
pub(crate) mod forward;
pub mod tokenizer;
mod weights;

pub use attention::{layer_mean, AttentionHook, AttentionRecord, Exclusion, SegmentMap};
pub use config::ModelConfig;
pub use forward::{argmax, ForwardOutput, KvCache};
pub use weights::{param_family, LayerWeights, ModelWeights, WEIGHTS_MAGIC};

use std::path::Path;

use crate::error::Result;

/// Configuration plus weights. Immutable once built; share it by reference
/// across threads and give each generation stream its own [`KvCache`].
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        weights.check_shapes(&config)?;
        Ok(Self { config, weights })
    }

    /// Fresh model with seeded scaled-normal initialization.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let weights = ModelWeights::init(&config, seed);
        Ok(Self { config, weights })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        weights::save_weights(path.as_ref(), &self.config, &self.weights)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (config, weights) = weights::load_weights(path.as_ref())?;
        Ok(Self { config, weights })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        weights::encode(&self.config, &self.weights)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (config, weights) = weights::decode(bytes)?;
        Ok(Self { config, weights })
    }
}
