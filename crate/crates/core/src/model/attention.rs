use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Post-softmax attention scores of one head for a block of query rows.
///
/// `scores` has shape `rows × (row_offset + rows)`: local row `r` is the
/// query at absolute position `row_offset + r`, columns are absolute key
/// positions. A full-sequence capture has `row_offset == 0` and is square.
/// Entries right of the diagonal are always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    pub row_offset: usize,
    pub scores: Tensor,
}

impl AttentionRecord {
    pub fn new(layer: usize, head: usize, row_offset: usize, scores: Tensor) -> Result<Self> {
        let (rows, cols) = match scores.shape() {
            [r, c] => (*r, *c),
            s => {
                return Err(Error::Dimension(format!(
                    "attention scores must be a matrix, got {s:?}"
                )))
            }
        };
        if cols != row_offset + rows {
            return Err(Error::Dimension(format!(
                "{rows} query rows at offset {row_offset} need {} key columns, got {cols}",
                row_offset + rows
            )));
        }
        Ok(Self {
            layer,
            head,
            row_offset,
            scores,
        })
    }

    pub fn rows(&self) -> usize {
        self.scores.rows()
    }

    pub fn cols(&self) -> usize {
        self.scores.cols()
    }

    /// Absolute query position of local row `r`.
    pub fn query_pos(&self, r: usize) -> usize {
        self.row_offset + r
    }

    /// Largest |row sum - 1| over all rows.
    pub fn row_sum_error(&self) -> f64 {
        (0..self.rows())
            .map(|r| (self.scores.row(r).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_causal(&self) -> bool {
        (0..self.rows()).all(|r| {
            self.scores.row(r)[self.query_pos(r) + 1..]
                .iter()
                .all(|&v| v == 0.0)
        })
    }
}

/// Head-averaged scores of one layer. All records must share layer and row block.
pub fn layer_mean(records: &[&AttentionRecord]) -> Result<Tensor> {
    let first = records
        .first()
        .ok_or_else(|| Error::Dimension("layer_mean of zero heads".into()))?;
    let mut acc = Tensor::zeros(first.scores.shape());
    for rec in records {
        if rec.scores.shape() != first.scores.shape() || rec.row_offset != first.row_offset {
            return Err(Error::Dimension(format!(
                "cannot average heads with shapes {:?} and {:?}",
                first.scores.shape(),
                rec.scores.shape()
            )));
        }
        for (a, v) in acc.data_mut().iter_mut().zip(rec.scores.data()) {
            *a += v;
        }
    }
    let inv = 1.0 / records.len() as f64;
    acc.data_mut().iter_mut().for_each(|v| *v *= inv);
    Ok(acc)
}

/// Which (query, key) pairs are protected from amplification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Exclusion {
    /// Skip any pair where the query or the key lies at or after `prompt_len`.
    #[default]
    DialogueSpan,
    /// Skip pairs where the key is one of the `recent_window` most recent
    /// positions relative to the query (`i - j < w`).
    RecentWindow,
    /// Protect nothing.
    None,
}

/// Splits a sequence into a prompt span `[0, prompt_len)` and a dialogue
/// span `[prompt_len, seq)`. Setting `prompt_len` to the full input length
/// makes the dialogue span exactly the generated tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentMap {
    pub prompt_len: usize,
    pub recent_window: usize,
    #[serde(default)]
    pub exclusion: Exclusion,
}

impl SegmentMap {
    pub fn new(prompt_len: usize, recent_window: usize) -> Self {
        Self {
            prompt_len,
            recent_window,
            exclusion: Exclusion::DialogueSpan,
        }
    }

    pub fn with_exclusion(mut self, exclusion: Exclusion) -> Self {
        self.exclusion = exclusion;
        self
    }

    /// Checks the span partition against a sequence length.
    pub fn check(&self, seq: usize) -> Result<()> {
        if self.prompt_len > seq {
            return Err(Error::Spec(format!(
                "prompt span [0, {}) exceeds sequence length {seq}",
                self.prompt_len
            )));
        }
        if self.recent_window > seq {
            return Err(Error::Spec(format!(
                "recent window {} exceeds sequence length {seq}",
                self.recent_window
            )));
        }
        Ok(())
    }

    pub fn in_prompt(&self, pos: usize) -> bool {
        pos < self.prompt_len
    }

    pub fn in_dialogue(&self, pos: usize) -> bool {
        pos >= self.prompt_len
    }

    /// True when the pair `(query, key)` touches the protected set.
    pub fn excluded(&self, query: usize, key: usize) -> bool {
        match self.exclusion {
            Exclusion::DialogueSpan => self.in_dialogue(query) || self.in_dialogue(key),
            Exclusion::RecentWindow => query - key < self.recent_window,
            Exclusion::None => false,
        }
    }
}

/// Called once per layer with every head's post-softmax scores, before they
/// are multiplied with the values. Implementations may rewrite the scores.
pub trait AttentionHook {
    fn on_layer(&mut self, layer: usize, heads: &mut [AttentionRecord]) -> Result<()>;
}
