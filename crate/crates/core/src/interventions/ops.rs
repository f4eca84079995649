//! Row-local rewrites of post-softmax attention scores.
//!
//! Every operation works on an [`AttentionRecord`] block, so the same code
//! serves full-sequence captures and the single-row blocks produced during
//! cached decoding. Rows are only renormalized when something in them
//! actually changed, which keeps untouched rows bit-identical.

use std::collections::BTreeSet;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::{AttentionRecord, SegmentMap};
use crate::numerics::Tensor;

/// Columns of a square, causal, head-averaged score matrix whose mean over
/// the causally valid rows (`i >= j`) exceeds `threshold`, restricted to
/// `span`.
pub fn detect_anchor_tokens(
    layer_mean: &Tensor,
    span: Range<usize>,
    threshold: f64,
) -> Result<BTreeSet<usize>> {
    let n = square_size(layer_mean)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Spec(format!(
            "anchor threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let mut anchors = BTreeSet::new();
    for j in span.start..span.end.min(n) {
        let mean = (j..n).map(|i| layer_mean.get(i, j)).sum::<f64>() / (n - j) as f64;
        if mean > threshold {
            anchors.insert(j);
        }
    }
    Ok(anchors)
}

/// Mean attention each column receives over its valid rows.
pub fn column_means(layer_mean: &Tensor) -> Result<Vec<f64>> {
    let n = square_size(layer_mean)?;
    Ok((0..n)
        .map(|j| (j..n).map(|i| layer_mean.get(i, j)).sum::<f64>() / (n - j) as f64)
        .collect())
}

fn square_size(t: &Tensor) -> Result<usize> {
    match t.shape() {
        [r, c] if r == c => Ok(*r),
        s => Err(Error::Dimension(format!(
            "expected a square score matrix, got {s:?}"
        ))),
    }
}

fn renormalize_row(row: &mut [f64]) {
    let sum: f64 = row.iter().sum();
    if sum > 0.0 {
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

/// Zeroes every causally valid column selected by `pick`.
fn zero_columns(rec: &mut AttentionRecord, renormalize: bool, pick: impl Fn(usize) -> bool) {
    for r in 0..rec.rows() {
        let i = rec.query_pos(r);
        let row = &mut rec.scores.row_mut(r)[..=i];
        let mut changed = false;
        for (j, s) in row.iter_mut().enumerate() {
            if pick(j) && *s != 0.0 {
                *s = 0.0;
                changed = true;
            }
        }
        if renormalize && changed {
            renormalize_row(row);
        }
    }
}

fn check_anchors(anchors: &BTreeSet<usize>, segment: &SegmentMap) -> Result<()> {
    match anchors.iter().find(|&&a| !segment.in_prompt(a)) {
        Some(a) => Err(Error::Spec(format!(
            "anchor {a} lies outside the prompt span [0, {})",
            segment.prompt_len
        ))),
        None => Ok(()),
    }
}

/// Keeps only the anchor columns of the prompt span.
pub fn apply_zero_non_anchor_prompt(
    rec: &mut AttentionRecord,
    anchors: &BTreeSet<usize>,
    segment: &SegmentMap,
    renormalize: bool,
) -> Result<()> {
    check_anchors(anchors, segment)?;
    zero_columns(rec, renormalize, |j| {
        segment.in_prompt(j) && !anchors.contains(&j)
    });
    Ok(())
}

/// Removes the anchor columns of the prompt span.
pub fn apply_zero_anchor_prompt(
    rec: &mut AttentionRecord,
    anchors: &BTreeSet<usize>,
    segment: &SegmentMap,
    renormalize: bool,
) -> Result<()> {
    check_anchors(anchors, segment)?;
    zero_columns(rec, renormalize, |j| anchors.contains(&j));
    Ok(())
}

/// Removes every prompt column. Prompt rows end up all-zero, so those
/// positions receive nothing from attention in this layer.
pub fn apply_zero_prompt(rec: &mut AttentionRecord, segment: &SegmentMap, renormalize: bool) {
    zero_columns(rec, renormalize, |j| segment.in_prompt(j));
}

/// Zeroes the `window` most recent keys of each query (`j` in
/// `(i - window, i]`). A row left all-zero is replaced by a uniform
/// distribution over its valid columns; the absolute positions of such rows
/// are returned.
pub fn apply_zero_recent(
    rec: &mut AttentionRecord,
    window: usize,
    renormalize: bool,
) -> Result<Vec<usize>> {
    if window == 0 {
        return Err(Error::Spec("recent window must be >= 1".into()));
    }
    let mut degenerate = Vec::new();
    for r in 0..rec.rows() {
        let i = rec.query_pos(r);
        let row = &mut rec.scores.row_mut(r)[..=i];
        let lo = (i + 1).saturating_sub(window);
        let mut changed = false;
        for s in &mut row[lo..] {
            if *s != 0.0 {
                *s = 0.0;
                changed = true;
            }
        }
        if row.iter().all(|&v| v == 0.0) {
            row.fill(1.0 / (i + 1) as f64);
            degenerate.push(i);
        } else if renormalize && changed {
            renormalize_row(row);
        }
    }
    Ok(degenerate)
}

/// Layers touched by the alternating ablation: `start, start + 2, ...`
/// up to `end` inclusive.
pub fn alternating_layers(start: usize, end: usize, max_layer: usize) -> Result<Vec<usize>> {
    if start > end || end > max_layer {
        return Err(Error::Spec(format!(
            "layer range [{start}, {end}] is outside the model's layers [0, {max_layer}]"
        )));
    }
    Ok((start..=end).step_by(2).collect())
}

/// How the binary pattern mask picks keys from each source row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskRule {
    /// The `k` highest-scoring valid keys (lower column wins ties).
    TopK(usize),
    /// Keys scoring at or above the nearest-rank `q`-quantile of the row.
    Percentile(f64),
}

/// Binary mask marking which (query, key) pairs the source layer attends to.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternMask {
    pub source_layer: usize,
    pub row_offset: usize,
    pub mask: Tensor,
}

impl PatternMask {
    pub fn is_lower_triangular(&self) -> bool {
        (0..self.mask.rows()).all(|r| {
            self.mask.row(r)[self.row_offset + r + 1..]
                .iter()
                .all(|&v| v == 0.0)
        })
    }
}

/// Builds the mask from head-averaged source-layer scores laid out like an
/// [`AttentionRecord`] block (`rows × (row_offset + rows)`).
pub fn build_pattern_mask(
    source: &Tensor,
    row_offset: usize,
    source_layer: usize,
    rule: MaskRule,
) -> Result<PatternMask> {
    let (rows, cols) = match source.shape() {
        [r, c] => (*r, *c),
        s => {
            return Err(Error::Dimension(format!(
                "source scores must be a matrix, got {s:?}"
            )))
        }
    };
    if cols != row_offset + rows {
        return Err(Error::Dimension(format!(
            "{rows} source rows at offset {row_offset} need {} columns, got {cols}",
            row_offset + rows
        )));
    }
    match rule {
        MaskRule::TopK(0) => return Err(Error::Spec("top-k mask needs k >= 1".into())),
        MaskRule::Percentile(q) if !(0.0..=1.0).contains(&q) => {
            return Err(Error::Spec(format!(
                "mask percentile must lie in [0, 1], got {q}"
            )))
        }
        _ => {}
    }
    let mut mask = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        let valid = row_offset + r + 1;
        let scores = &source.row(r)[..valid];
        let out = &mut mask.row_mut(r)[..valid];
        match rule {
            MaskRule::TopK(k) if k >= valid => out.fill(1.0),
            MaskRule::TopK(k) => {
                let mut order: Vec<usize> = (0..valid).collect();
                order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
                for &j in &order[..k] {
                    out[j] = 1.0;
                }
            }
            MaskRule::Percentile(q) => {
                let mut sorted = scores.to_vec();
                sorted.sort_by(f64::total_cmp);
                let rank = ((q * valid as f64).ceil() as usize).clamp(1, valid);
                let cut = sorted[rank - 1];
                for (m, &s) in out.iter_mut().zip(scores) {
                    if s >= cut {
                        *m = 1.0;
                    }
                }
            }
        }
    }
    Ok(PatternMask {
        source_layer,
        row_offset,
        mask,
    })
}

/// Layer-decayed amplification guided by a source-layer pattern:
/// `A(i,j) ← A(i,j) · (1 + (1 - l/h) · M(i,j))` for every pair outside the
/// protected set of `segment`. With `renormalize`, each changed row is then
/// divided by its new sum. At `l == h` the record is returned untouched.
pub fn apply_amplification(
    rec: &mut AttentionRecord,
    mask: &PatternMask,
    layer: usize,
    max_layer: usize,
    segment: &SegmentMap,
    renormalize: bool,
) -> Result<()> {
    if max_layer == 0 || layer == 0 || layer > max_layer {
        return Err(Error::Spec(format!(
            "amplification needs 0 < layer <= max layer, got layer {layer} with max {max_layer}"
        )));
    }
    if mask.row_offset != rec.row_offset || mask.mask.shape() != rec.scores.shape() {
        return Err(Error::Dimension(format!(
            "mask block {:?}@{} does not match record block {:?}@{}",
            mask.mask.shape(),
            mask.row_offset,
            rec.scores.shape(),
            rec.row_offset
        )));
    }
    let decay = 1.0 - layer as f64 / max_layer as f64;
    if decay == 0.0 {
        return Ok(());
    }
    for r in 0..rec.rows() {
        let i = rec.query_pos(r);
        let m_row = &mask.mask.row(r)[..=i];
        let row = &mut rec.scores.row_mut(r)[..=i];
        let mut changed = false;
        for (j, (s, &m)) in row.iter_mut().zip(m_row).enumerate() {
            if m == 0.0 || *s == 0.0 || segment.excluded(i, j) {
                continue;
            }
            *s *= 1.0 + decay * m;
            changed = true;
        }
        if renormalize && changed {
            renormalize_row(row);
        }
    }
    Ok(())
}
