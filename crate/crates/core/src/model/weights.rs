//! Parameter storage, seeded initialization and the `ATNF1` weight file.
//!
//! File layout: one UTF-8 JSON header line terminated by `\n`, then a blob
//! of little-endian `f64` values. The header holds the magic string, the
//! model config and a manifest of `{name, shape, offset}` entries where
//! `offset` is the byte offset of the tensor inside the blob. Tensors are
//! stored back to back in manifest order.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::numerics::Tensor;

pub const WEIGHTS_MAGIC: &str = "ATNF1";

const INIT_STD: f64 = 0.02;

/// Linear maps are stored `[in, out]` and applied as `x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub tok_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
}

#[derive(Clone, Copy, PartialEq)]
enum Init {
    Ones,
    Normal,
    /// Projections that write into the residual stream.
    Residual,
}

struct Slot {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn layout(config: &ModelConfig) -> Vec<Slot> {
    let d = config.d_model;
    let f = config.d_ff;
    let slot = |name: String, shape: Vec<usize>, init| Slot { name, shape, init };
    let mut out = vec![slot(
        "tok_embedding".into(),
        vec![config.vocab_size, d],
        Init::Normal,
    )];
    for l in 0..config.n_layers {
        let p = format!("layers.{l}.");
        out.push(slot(format!("{p}attn_norm"), vec![d], Init::Ones));
        out.push(slot(format!("{p}wq"), vec![d, d], Init::Normal));
        out.push(slot(format!("{p}wk"), vec![d, d], Init::Normal));
        out.push(slot(format!("{p}wv"), vec![d, d], Init::Normal));
        out.push(slot(format!("{p}wo"), vec![d, d], Init::Residual));
        out.push(slot(format!("{p}ffn_norm"), vec![d], Init::Ones));
        out.push(slot(format!("{p}w_gate"), vec![d, f], Init::Normal));
        out.push(slot(format!("{p}w_up"), vec![d, f], Init::Normal));
        out.push(slot(format!("{p}w_down"), vec![f, d], Init::Residual));
    }
    out.push(slot("final_norm".into(), vec![d], Init::Ones));
    out.push(slot(
        "lm_head".into(),
        vec![d, config.vocab_size],
        Init::Normal,
    ));
    out
}

/// Strips the `layers.N.` prefix: `layers.3.wq` → `wq`.
pub fn param_family(name: &str) -> &str {
    match name.strip_prefix("layers.") {
        Some(rest) => rest.split_once('.').map_or(rest, |(_, fam)| fam),
        None => name,
    }
}

impl ModelWeights {
    /// Seeded init with a PCG-64 stream (`rand_pcg::Pcg64`): gains are 1,
    /// matrices are N(0, 0.02²), residual-path projections (`wo`, `w_down`)
    /// use std 0.02/√n_layers. Tensors are filled in manifest order.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = Pcg64::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let residual =
            Normal::new(0.0, INIT_STD / (config.n_layers as f64).sqrt()).expect("valid std");
        let tensors = layout(config)
            .into_iter()
            .map(|slot| {
                let n: usize = slot.shape.iter().product();
                let data: Vec<f64> = match slot.init {
                    Init::Ones => vec![1.0; n],
                    Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                    Init::Residual => (0..n).map(|_| residual.sample(&mut rng)).collect(),
                };
                Tensor::new(slot.shape, data).expect("layout shapes are consistent")
            })
            .collect();
        Self::from_ordered(config, tensors)
    }

    /// All-zero tensors with the model's shapes (gradient/optimizer buffers).
    pub fn zeros(config: &ModelConfig) -> Self {
        let tensors = layout(config)
            .into_iter()
            .map(|slot| Tensor::zeros(&slot.shape))
            .collect();
        Self::from_ordered(config, tensors)
    }

    fn from_ordered(config: &ModelConfig, tensors: Vec<Tensor>) -> Self {
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("layout length");
        let tok_embedding = next();
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                ffn_norm: next(),
                w_gate: next(),
                w_up: next(),
                w_down: next(),
            })
            .collect();
        let final_norm = next();
        let lm_head = next();
        Self {
            tok_embedding,
            layers,
            final_norm,
            lm_head,
        }
    }

    /// Tensors in manifest order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.tok_embedding];
        for l in &self.layers {
            out.extend([
                &l.attn_norm,
                &l.wq,
                &l.wk,
                &l.wv,
                &l.wo,
                &l.ffn_norm,
                &l.w_gate,
                &l.w_up,
                &l.w_down,
            ]);
        }
        out.push(&self.final_norm);
        out.push(&self.lm_head);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_embedding];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn_norm,
                &mut l.w_gate,
                &mut l.w_up,
                &mut l.w_down,
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    /// Manifest names, parallel to [`ModelWeights::tensors`].
    pub fn names(config: &ModelConfig) -> Vec<String> {
        layout(config).into_iter().map(|s| s.name).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.n_layers {
            return Err(Error::format(
                "layers",
                format!(
                    "config has {} layers, weights have {}",
                    config.n_layers,
                    self.layers.len()
                ),
            ));
        }
        for (slot, t) in layout(config).iter().zip(self.tensors()) {
            if t.shape() != slot.shape.as_slice() {
                return Err(Error::format(
                    &slot.name,
                    format!("expected shape {:?}, found {:?}", slot.shape, t.shape()),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    magic: String,
    config: ModelConfig,
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

pub(crate) fn encode(config: &ModelConfig, weights: &ModelWeights) -> Vec<u8> {
    let mut offset = 0u64;
    let mut entries = Vec::new();
    for (name, t) in ModelWeights::names(config)
        .into_iter()
        .zip(weights.tensors())
    {
        entries.push(ManifestEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 8 * t.len() as u64;
    }
    let header = Header {
        magic: WEIGHTS_MAGIC.into(),
        config: *config,
        tensors: entries,
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.reserve(offset as usize);
    for t in weights.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub(crate) fn decode(bytes: &[u8]) -> Result<(ModelConfig, ModelWeights)> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format("header", "missing header line terminator"))?;
    let header: Header = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::format("header", format!("malformed JSON header: {e}")))?;
    if header.magic != WEIGHTS_MAGIC {
        return Err(Error::format(
            "header",
            format!("bad magic {:?}, expected {WEIGHTS_MAGIC:?}", header.magic),
        ));
    }
    let config = header.config;
    config
        .validate()
        .map_err(|e| Error::format("header", e.to_string()))?;
    let blob = &bytes[newline + 1..];
    let slots = layout(&config);
    if header.tensors.len() != slots.len() {
        return Err(Error::format(
            "header",
            format!(
                "manifest lists {} tensors, config needs {}",
                header.tensors.len(),
                slots.len()
            ),
        ));
    }
    for (slot, entry) in slots.iter().zip(&header.tensors) {
        if entry.name != slot.name {
            return Err(Error::format(
                &entry.name,
                format!(
                    "unexpected tensor, expected `{}` at this position",
                    slot.name
                ),
            ));
        }
        if entry.shape != slot.shape {
            return Err(Error::format(
                &slot.name,
                format!(
                    "shape {:?} does not match config shape {:?}",
                    entry.shape, slot.shape
                ),
            ));
        }
    }
    let mut tensors = Vec::with_capacity(slots.len());
    let mut end_of_data = 0usize;
    for (slot, entry) in slots.into_iter().zip(&header.tensors) {
        let n: usize = slot.shape.iter().product();
        let start = usize::try_from(entry.offset)
            .map_err(|_| Error::format(&slot.name, "offset overflows"))?;
        let end = start + 8 * n;
        if end > blob.len() {
            return Err(Error::format(
                &slot.name,
                format!(
                    "truncated blob: needs bytes {start}..{end}, blob has {}",
                    blob.len()
                ),
            ));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(&slot.name, "non-finite value"));
        }
        end_of_data = end_of_data.max(end);
        tensors.push(Tensor::new(slot.shape, data)?);
    }
    if end_of_data != blob.len() {
        return Err(Error::format(
            "blob",
            format!(
                "{} trailing bytes after the last tensor",
                blob.len() - end_of_data
            ),
        ));
    }
    Ok((config, ModelWeights::from_ordered(&config, tensors)))
}

pub(crate) fn save_weights(
    path: &Path,
    config: &ModelConfig,
    weights: &ModelWeights,
) -> Result<()> {
    weights.check_shapes(config)?;
    fs::write(path, encode(config, weights))?;
    Ok(())
}

pub(crate) fn load_weights(path: &Path) -> Result<(ModelConfig, ModelWeights)> {
    decode(&fs::read(path)?)
}
