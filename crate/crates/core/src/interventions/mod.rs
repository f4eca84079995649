//! Declarative attention-score manipulations applied inside the forward pass.
//!
//! An [`InterventionSpec`] names one manipulation and the layers it covers.
//! A [`Pipeline`] turns an ordered list of specs into an
//! [`AttentionHook`](crate::model::AttentionHook). Specs covering the same
//! layer run in list order; conflicts are not detected, so order is the
//! resolution rule.

mod ops;

pub use ops::{
    alternating_layers, apply_amplification, apply_zero_anchor_prompt,
    apply_zero_non_anchor_prompt, apply_zero_prompt, apply_zero_recent, build_pattern_mask,
    column_means, detect_anchor_tokens, MaskRule, PatternMask,
};

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    layer_mean, AttentionHook, AttentionRecord, Exclusion, Model, ModelConfig, SegmentMap,
};
use crate::numerics::Tensor;

pub const DEFAULT_ANCHOR_THRESHOLD: f64 = 0.2;
pub const DEFAULT_RECENT_WINDOW: usize = 1;
pub const DEFAULT_TOP_K: usize = 8;
pub const DEFAULT_SOURCE_LAYER: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    ZeroNonAnchorPrompt,
    ZeroAnchorPrompt,
    ZeroRecent,
    ZeroPromptAlternating,
    AmplifyTopPattern,
}

impl InterventionKind {
    pub fn needs_anchors(self) -> bool {
        matches!(self, Self::ZeroNonAnchorPrompt | Self::ZeroAnchorPrompt)
    }

    fn default_renormalize(self) -> bool {
        self == Self::AmplifyTopPattern
    }
}

/// Inclusive layer range, serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct LayerRange {
    pub start: usize,
    pub end: usize,
}

impl LayerRange {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn single(layer: usize) -> Self {
        Self::new(layer, layer)
    }

    pub fn contains(&self, layer: usize) -> bool {
        (self.start..=self.end).contains(&layer)
    }
}

impl From<[usize; 2]> for LayerRange {
    fn from([start, end]: [usize; 2]) -> Self {
        Self { start, end }
    }
}

impl From<LayerRange> for [usize; 2] {
    fn from(r: LayerRange) -> Self {
        [r.start, r.end]
    }
}

/// Kind-specific parameters. Unset fields take the documented defaults;
/// [`InterventionSpec::resolved`] fills them in.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchors: Option<BTreeSet<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recent_window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    /// Replaces top-k with a per-row quantile threshold when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub percentile: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub renormalize: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_layer: Option<usize>,
}

/// Prompt/dialogue split for a spec. `prompt_len: None` means the prompt
/// length of whatever run the spec is used in.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_len: Option<usize>,
    #[serde(default)]
    pub exclusion: Exclusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionSpec {
    pub kind: InterventionKind,
    pub layer_range: LayerRange,
    #[serde(default)]
    pub params: InterventionParams,
    #[serde(default)]
    pub segment: SegmentSpec,
}

impl InterventionSpec {
    pub fn new(kind: InterventionKind, layer_range: LayerRange) -> Self {
        Self {
            kind,
            layer_range,
            params: InterventionParams::default(),
            segment: SegmentSpec::default(),
        }
    }

    pub fn with_params(mut self, params: InterventionParams) -> Self {
        self.params = params;
        self
    }

    pub fn with_prompt_len(mut self, prompt_len: usize) -> Self {
        self.segment.prompt_len = Some(prompt_len);
        self
    }

    pub fn anchor_threshold(&self) -> f64 {
        self.params
            .anchor_threshold
            .unwrap_or(DEFAULT_ANCHOR_THRESHOLD)
    }

    pub fn recent_window(&self) -> usize {
        self.params.recent_window.unwrap_or(DEFAULT_RECENT_WINDOW)
    }

    pub fn renormalize(&self) -> bool {
        self.params
            .renormalize
            .unwrap_or_else(|| self.kind.default_renormalize())
    }

    pub fn source_layer(&self) -> usize {
        self.params.source_layer.unwrap_or(DEFAULT_SOURCE_LAYER)
    }

    pub fn mask_rule(&self) -> MaskRule {
        match self.params.percentile {
            Some(q) => MaskRule::Percentile(q),
            None => MaskRule::TopK(self.params.top_k.unwrap_or(DEFAULT_TOP_K)),
        }
    }

    /// Segment map for a run whose prompt spans `[0, run_prompt_len)`.
    pub fn segment_map(&self, run_prompt_len: usize) -> SegmentMap {
        SegmentMap::new(
            self.segment.prompt_len.unwrap_or(run_prompt_len),
            self.recent_window(),
        )
        .with_exclusion(self.segment.exclusion)
    }

    /// Copy with every parameter that applies to this kind made explicit.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        let p = &mut out.params;
        p.renormalize = Some(self.renormalize());
        match self.kind {
            InterventionKind::ZeroNonAnchorPrompt | InterventionKind::ZeroAnchorPrompt => {
                p.anchor_threshold = Some(self.anchor_threshold());
            }
            InterventionKind::ZeroRecent => p.recent_window = Some(self.recent_window()),
            InterventionKind::ZeroPromptAlternating => {}
            InterventionKind::AmplifyTopPattern => {
                p.source_layer = Some(self.source_layer());
                if p.percentile.is_none() {
                    p.top_k = Some(self.params.top_k.unwrap_or(DEFAULT_TOP_K));
                }
                if self.segment.exclusion == Exclusion::RecentWindow {
                    p.recent_window = Some(self.recent_window());
                }
            }
        }
        out
    }

    /// Checks the spec against a model with layers `0..=max_layer`.
    pub fn validate(&self, max_layer: usize) -> Result<()> {
        let LayerRange { start, end } = self.layer_range;
        if start > end || end > max_layer {
            return Err(Error::Spec(format!(
                "{:?}: layer range [{start}, {end}] is outside [0, {max_layer}]",
                self.kind
            )));
        }
        let tau = self.anchor_threshold();
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Spec(format!(
                "anchor threshold must lie in (0, 1), got {tau}"
            )));
        }
        if self.recent_window() == 0 {
            return Err(Error::Spec("recent window must be >= 1".into()));
        }
        match self.mask_rule() {
            MaskRule::TopK(0) => return Err(Error::Spec("top-k mask needs k >= 1".into())),
            MaskRule::Percentile(q) if !(0.0..=1.0).contains(&q) => {
                return Err(Error::Spec(format!(
                    "mask percentile must lie in [0, 1], got {q}"
                )))
            }
            _ => {}
        }
        if self.kind == InterventionKind::AmplifyTopPattern && self.source_layer() >= start {
            return Err(Error::Spec(format!(
                "source layer {} must lie below the amplified range starting at {start}",
                self.source_layer()
            )));
        }
        Ok(())
    }

    /// Layers this spec touches in a model with layers `0..=max_layer`.
    pub fn active_layers(&self, max_layer: usize) -> Result<Vec<usize>> {
        self.validate(max_layer)?;
        let LayerRange { start, end } = self.layer_range;
        match self.kind {
            InterventionKind::ZeroPromptAlternating => alternating_layers(start, end, max_layer),
            _ => Ok((start..=end).collect()),
        }
    }
}

/// Reads a JSON array of specs.
pub fn read_specs(path: &Path) -> Result<Vec<InterventionSpec>> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Fills in `anchors` for anchor-based specs that do not list them, using a
/// baseline capture of `tokens`: the heads and layers of each spec's range
/// are averaged and columns of the prompt span with mean attention above the
/// spec's threshold become anchors.
pub fn resolve_anchors(
    model: &Model,
    tokens: &[u32],
    prompt_len: usize,
    specs: &[InterventionSpec],
) -> Result<Vec<InterventionSpec>> {
    let max_layer = model.config.max_layer();
    for spec in specs {
        spec.validate(max_layer)?;
    }
    if !specs
        .iter()
        .any(|s| s.kind.needs_anchors() && s.params.anchors.is_none())
    {
        return Ok(specs.to_vec());
    }
    let capture = model.forward(tokens, None, true, None)?;
    let mut per_layer: BTreeMap<usize, Tensor> = BTreeMap::new();
    for layer in 0..=max_layer {
        let heads: Vec<&AttentionRecord> = capture
            .records
            .iter()
            .filter(|r| r.layer == layer)
            .collect();
        per_layer.insert(layer, layer_mean(&heads)?);
    }
    specs
        .iter()
        .map(|spec| {
            let mut spec = spec.clone();
            if spec.kind.needs_anchors() && spec.params.anchors.is_none() {
                let range = spec.layer_range;
                let n = tokens.len();
                let mut acc = Tensor::zeros(&[n, n]);
                for layer in range.start..=range.end {
                    for (a, v) in acc.data_mut().iter_mut().zip(per_layer[&layer].data()) {
                        *a += v;
                    }
                }
                let count = (range.end - range.start + 1) as f64;
                acc.data_mut().iter_mut().for_each(|v| *v /= count);
                let span_end = spec.segment_map(prompt_len).prompt_len.min(n);
                spec.params.anchors = Some(detect_anchor_tokens(
                    &acc,
                    0..span_end,
                    spec.anchor_threshold(),
                )?);
            }
            Ok(spec)
        })
        .collect()
}

/// Which layers each spec actually modified, plus degenerate-row counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedSpec {
    pub spec: InterventionSpec,
    pub applied_layers: BTreeSet<usize>,
    pub degenerate_rows: usize,
}

/// Forward-pass hook applying an ordered list of specs.
///
/// The hook keeps state across calls: the head-averaged scores of each
/// amplification source layer are stored as that layer goes by and used to
/// build masks for the later layers of the same call. Masks are rebuilt on
/// every call, so during cached decoding each new row gets a mask from its
/// own source-layer row.
#[derive(Debug, Clone)]
pub struct Pipeline {
    specs: Vec<InterventionSpec>,
    layers: Vec<BTreeSet<usize>>,
    segments: Vec<SegmentMap>,
    max_layer: usize,
    source_means: BTreeMap<usize, (usize, Tensor)>,
    applied: Vec<AppliedSpec>,
}

impl Pipeline {
    /// `prompt_len` is the prompt length used by specs that do not fix one.
    pub fn new(
        specs: &[InterventionSpec],
        config: &ModelConfig,
        prompt_len: usize,
    ) -> Result<Self> {
        let max_layer = config.max_layer();
        let mut layers = Vec::with_capacity(specs.len());
        let mut segments = Vec::with_capacity(specs.len());
        for spec in specs {
            layers.push(spec.active_layers(max_layer)?.into_iter().collect());
            if spec.kind.needs_anchors() {
                let seg = spec.segment_map(prompt_len);
                let anchors = spec.params.anchors.as_ref().ok_or_else(|| {
                    Error::Spec(format!(
                        "{:?} needs anchors; list them or resolve them from a capture first",
                        spec.kind
                    ))
                })?;
                if let Some(a) = anchors.iter().find(|&&a| !seg.in_prompt(a)) {
                    return Err(Error::Spec(format!(
                        "anchor {a} lies outside the prompt span [0, {})",
                        seg.prompt_len
                    )));
                }
            }
            segments.push(spec.segment_map(prompt_len));
        }
        Ok(Self {
            applied: specs
                .iter()
                .map(|s| AppliedSpec {
                    spec: s.resolved(),
                    applied_layers: BTreeSet::new(),
                    degenerate_rows: 0,
                })
                .collect(),
            specs: specs.to_vec(),
            layers,
            segments,
            max_layer,
            source_means: BTreeMap::new(),
        })
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Per-spec bookkeeping accumulated over every call so far.
    pub fn applied(&self) -> &[AppliedSpec] {
        &self.applied
    }

    fn source_layers(&self) -> BTreeSet<usize> {
        self.specs
            .iter()
            .filter(|s| s.kind == InterventionKind::AmplifyTopPattern)
            .map(|s| s.source_layer())
            .collect()
    }
}

impl AttentionHook for Pipeline {
    fn on_layer(&mut self, layer: usize, heads: &mut [AttentionRecord]) -> Result<()> {
        if layer == 0 {
            self.source_means.clear();
        }
        for (idx, spec) in self.specs.iter().enumerate() {
            if !self.layers[idx].contains(&layer) {
                continue;
            }
            let seg = &self.segments[idx];
            let renorm = spec.renormalize();
            let log = &mut self.applied[idx];
            match spec.kind {
                InterventionKind::ZeroNonAnchorPrompt | InterventionKind::ZeroAnchorPrompt => {
                    let anchors = spec
                        .params
                        .anchors
                        .as_ref()
                        .expect("checked in Pipeline::new");
                    for rec in heads.iter_mut() {
                        if spec.kind == InterventionKind::ZeroNonAnchorPrompt {
                            apply_zero_non_anchor_prompt(rec, anchors, seg, renorm)?;
                        } else {
                            apply_zero_anchor_prompt(rec, anchors, seg, renorm)?;
                        }
                    }
                }
                InterventionKind::ZeroRecent => {
                    for rec in heads.iter_mut() {
                        log.degenerate_rows +=
                            apply_zero_recent(rec, spec.recent_window(), renorm)?.len();
                    }
                }
                InterventionKind::ZeroPromptAlternating => {
                    for rec in heads.iter_mut() {
                        apply_zero_prompt(rec, seg, renorm);
                    }
                }
                InterventionKind::AmplifyTopPattern => {
                    let src = spec.source_layer();
                    let (offset, mean) = self.source_means.get(&src).ok_or_else(|| {
                        Error::State(format!(
                            "source layer {src} scores are missing when amplifying layer {layer}"
                        ))
                    })?;
                    let mask = build_pattern_mask(mean, *offset, src, spec.mask_rule())?;
                    for rec in heads.iter_mut() {
                        apply_amplification(rec, &mask, layer, self.max_layer, seg, renorm)?;
                    }
                }
            }
            log.applied_layers.insert(layer);
        }
        if self.source_layers().contains(&layer) {
            if let Some(first) = heads.first() {
                let offset = first.row_offset;
                let refs: Vec<&AttentionRecord> = heads.iter().collect();
                self.source_means
                    .insert(layer, (offset, layer_mean(&refs)?));
            }
        }
        Ok(())
    }
}
