use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::tokenizer::BYTE_VOCAB;
use crate::numerics::ROPE_BASE;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Number of blocks; layer indices run `0..n_layers`, so the maximum
    /// layer index used by the amplification decay is `n_layers - 1`.
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: BYTE_VOCAB,
            d_model: 128,
            n_heads: 4,
            n_layers: 8,
            d_ff: 344,
            max_seq: 512,
            rope_base: ROPE_BASE,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size < BYTE_VOCAB {
            return fail(format!(
                "vocab_size {} cannot hold the {BYTE_VOCAB} byte/special tokens",
                self.vocab_size
            ));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_seq == 0 {
            return fail("d_model, n_heads, d_ff and max_seq must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return fail(format!(
                "head dimension {} must be even for rotary embeddings",
                self.head_dim()
            ));
        }
        if self.n_layers < 2 {
            return fail(format!("n_layers must be >= 2, got {}", self.n_layers));
        }
        if !(self.rope_base > 1.0) || !(self.norm_eps > 0.0) {
            return fail("rope_base must be > 1 and norm_eps > 0".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `h`: the largest layer index.
    pub fn max_layer(&self) -> usize {
        self.n_layers - 1
    }
}
