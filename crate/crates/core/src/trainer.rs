//! Full-parameter training with hand-written backprop, plus a
//! finite-difference gradient check.
//!
//! A step packs its batch of sequences into one row-stacked activation
//! matrix so every linear layer is a single matrix product; attention runs
//! per sequence on its own slice of rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::forward::silu;
use crate::model::{param_family, Model, ModelConfig, ModelWeights};
use crate::numerics::{
    self, gemm, gemm_nt, gemm_tn, rms_norm_into, rope_in_place, rope_inverse_in_place,
};

/// Keeps the dropout mask stream independent of batch sampling.
const DROPOUT_STREAM: u64 = 0x5eed_d50f_0a77_e11d;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning-rate shape over the run: linear warmup, then either constant or
/// cosine decay towards `min_lr_ratio · learning_rate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Inverted dropout on the attention output projection, training only.
    pub attn_output_dropout: f64,
    pub optimizer: Optimizer,
    pub schedule: Schedule,
    pub warmup_steps: usize,
    pub min_lr_ratio: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            steps: 1000,
            batch_size: 8,
            seed: 0,
            attn_output_dropout: 0.0,
            optimizer: Optimizer::default(),
            schedule: Schedule::Constant,
            warmup_steps: 0,
            min_lr_ratio: 0.1,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.attn_output_dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.attn_output_dropout
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::Config(format!(
                "min_lr_ratio must lie in [0, 1], got {}",
                self.min_lr_ratio
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad clip must be > 0, got {c}")));
            }
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::Config(format!(
                    "invalid Adam parameters beta1={beta1} beta2={beta2} eps={eps}"
                )));
            }
        }
        Ok(())
    }

    /// Learning rate used at step `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
                let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
                let floor = self.min_lr_ratio;
                let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
                self.learning_rate * (floor + (1.0 - floor) * cos)
            }
        }
    }
}

/// Inverted dropout: each entry is zeroed with probability `p`, survivors
/// are scaled by `1/(1-p)`. Returns the per-entry multipliers.
pub fn inverted_dropout(values: &mut [f64], p: f64, rng: &mut impl Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    values
        .iter_mut()
        .map(|v| {
            let m = if rng.random::<f64>() < p { 0.0 } else { keep };
            *v *= m;
            m
        })
        .collect()
}

/// Sequences packed row-wise. `bounds[s]..bounds[s + 1]` are the rows of
/// sequence `s`.
struct Packed {
    tokens: Vec<u32>,
    bounds: Vec<usize>,
}

impl Packed {
    fn new(seqs: &[&[u32]]) -> Self {
        let mut tokens = Vec::new();
        let mut bounds = vec![0];
        for s in seqs {
            tokens.extend_from_slice(s);
            bounds.push(tokens.len());
        }
        Self { tokens, bounds }
    }

    fn segments(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bounds.windows(2).map(|w| (w[0], w[1]))
    }

    fn targets(&self) -> usize {
        self.segments().map(|(a, b)| b - a - 1).sum()
    }
}

struct LayerTape {
    x_in: Vec<f64>,
    inv1: Vec<f64>,
    n1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Per (segment, head) row-major `len × len` probabilities.
    probs: Vec<Vec<f64>>,
    attn: Vec<f64>,
    drop: Option<Vec<f64>>,
    x_mid: Vec<f64>,
    inv2: Vec<f64>,
    n2: Vec<f64>,
    gate: Vec<f64>,
    up: Vec<f64>,
    act: Vec<f64>,
}

struct Tape {
    layers: Vec<LayerTape>,
    x_final: Vec<f64>,
    inv_f: Vec<f64>,
    n_f: Vec<f64>,
    logits: Vec<f64>,
}

fn norm_rows(x: &[f64], gain: &[f64], eps: f64, d: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let inv = (0..rows)
        .map(|r| {
            rms_norm_into(
                &x[r * d..(r + 1) * d],
                gain,
                eps,
                &mut out[r * d..(r + 1) * d],
            )
        })
        .collect();
    (out, inv)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn forward_tape(
    config: &ModelConfig,
    w: &ModelWeights,
    batch: &Packed,
    mut dropout: Option<(f64, &mut Pcg64)>,
) -> Tape {
    let (d, hd, nh, ff, v_sz) = (
        config.d_model,
        config.head_dim(),
        config.n_heads,
        config.d_ff,
        config.vocab_size,
    );
    let m = batch.tokens.len();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut x = vec![0.0; m * d];
    for (r, &t) in batch.tokens.iter().enumerate() {
        x[r * d..(r + 1) * d].copy_from_slice(w.tok_embedding.row(t as usize));
    }
    let mut layers = Vec::with_capacity(w.layers.len());
    for lw in &w.layers {
        let (n1, inv1) = norm_rows(&x, lw.attn_norm.data(), config.norm_eps, d);
        let mut q = vec![0.0; m * d];
        let mut k = vec![0.0; m * d];
        let mut v = vec![0.0; m * d];
        gemm(&n1, lw.wq.data(), &mut q, m, d, d);
        gemm(&n1, lw.wk.data(), &mut k, m, d, d);
        gemm(&n1, lw.wv.data(), &mut v, m, d, d);
        for (a, b) in batch.segments() {
            for r in a..b {
                for h in 0..nh {
                    let span = r * d + h * hd..r * d + (h + 1) * hd;
                    rope_in_place(&mut q[span.clone()], r - a, config.rope_base);
                    rope_in_place(&mut k[span], r - a, config.rope_base);
                }
            }
        }

        let mut attn = vec![0.0; m * d];
        let mut probs = Vec::new();
        for (a, b) in batch.segments() {
            let len = b - a;
            for h in 0..nh {
                let mut p = vec![0.0; len * len];
                for i in 0..len {
                    let qi = &q[(a + i) * d + h * hd..(a + i) * d + (h + 1) * hd];
                    let row = &mut p[i * len..i * len + i + 1];
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &k[(a + j) * d + h * hd..(a + j) * d + (h + 1) * hd];
                        *s = numerics::dot(qi, kj) * scale;
                    }
                    numerics::softmax_in_place(row);
                    let out = &mut attn[(a + i) * d + h * hd..(a + i) * d + (h + 1) * hd];
                    for (j, &pj) in row.iter().enumerate() {
                        if pj == 0.0 {
                            continue;
                        }
                        let vj = &v[(a + j) * d + h * hd..(a + j) * d + (h + 1) * hd];
                        for (o, &vv) in out.iter_mut().zip(vj) {
                            *o += pj * vv;
                        }
                    }
                }
                probs.push(p);
            }
        }

        let mut proj = vec![0.0; m * d];
        gemm(&attn, lw.wo.data(), &mut proj, m, d, d);
        let drop = match dropout.as_mut() {
            Some((p, rng)) if *p > 0.0 => Some(inverted_dropout(&mut proj, *p, *rng)),
            _ => None,
        };
        let x_in = std::mem::take(&mut x);
        let x_mid: Vec<f64> = x_in.iter().zip(&proj).map(|(a, b)| a + b).collect();

        let (n2, inv2) = norm_rows(&x_mid, lw.ffn_norm.data(), config.norm_eps, d);
        let mut gate = vec![0.0; m * ff];
        let mut up = vec![0.0; m * ff];
        gemm(&n2, lw.w_gate.data(), &mut gate, m, d, ff);
        gemm(&n2, lw.w_up.data(), &mut up, m, d, ff);
        let act: Vec<f64> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
        let mut down = vec![0.0; m * d];
        gemm(&act, lw.w_down.data(), &mut down, m, ff, d);
        x = x_mid.iter().zip(&down).map(|(a, b)| a + b).collect();

        layers.push(LayerTape {
            x_in,
            inv1,
            n1,
            q,
            k,
            v,
            probs,
            attn,
            drop,
            x_mid,
            inv2,
            n2,
            gate,
            up,
            act,
        });
    }
    let (n_f, inv_f) = norm_rows(&x, w.final_norm.data(), config.norm_eps, d);
    let mut logits = vec![0.0; m * v_sz];
    gemm(&n_f, w.lm_head.data(), &mut logits, m, d, v_sz);
    Tape {
        layers,
        x_final: x,
        inv_f,
        n_f,
        logits,
    }
}

/// Mean next-token cross-entropy and its gradient w.r.t. the logits.
fn loss_and_dlogits(batch: &Packed, logits: &[f64], vocab: usize) -> (f64, Vec<f64>) {
    let count = batch.targets() as f64;
    let mut dlogits = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for (a, b) in batch.segments() {
        for r in a..b - 1 {
            let row = &logits[r * vocab..(r + 1) * vocab];
            let target = batch.tokens[r + 1] as usize;
            let lse = numerics::log_sum_exp(row);
            loss += lse - row[target];
            let g = &mut dlogits[r * vocab..(r + 1) * vocab];
            for (gv, &z) in g.iter_mut().zip(row) {
                *gv = (z - lse).exp() / count;
            }
            g[target] -= 1.0 / count;
        }
    }
    (loss / count, dlogits)
}

/// Backprop through `y = x · g · inv`; adds into `dx` and `dgain`.
fn norm_backward(
    x: &[f64],
    inv: &[f64],
    gain: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    dgain: &mut [f64],
    d: usize,
) {
    for (r, &s) in inv.iter().enumerate() {
        let xs = &x[r * d..(r + 1) * d];
        let dys = &dy[r * d..(r + 1) * d];
        let mut dot = 0.0;
        for c in 0..d {
            dgain[c] += dys[c] * xs[c] * s;
            dot += gain[c] * dys[c] * xs[c];
        }
        let coef = s * s * s * dot / d as f64;
        let dxs = &mut dx[r * d..(r + 1) * d];
        for c in 0..d {
            dxs[c] += s * gain[c] * dys[c] - coef * xs[c];
        }
    }
}

fn backward(
    config: &ModelConfig,
    w: &ModelWeights,
    batch: &Packed,
    tape: &Tape,
    dlogits: &[f64],
) -> ModelWeights {
    let (d, hd, nh, ff, v_sz) = (
        config.d_model,
        config.head_dim(),
        config.n_heads,
        config.d_ff,
        config.vocab_size,
    );
    let m = batch.tokens.len();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut g = ModelWeights::zeros(config);

    gemm_tn(&tape.n_f, dlogits, g.lm_head.data_mut(), d, m, v_sz);
    let mut dn = vec![0.0; m * d];
    gemm_nt(dlogits, w.lm_head.data(), &mut dn, m, v_sz, d);
    let mut dx = vec![0.0; m * d];
    norm_backward(
        &tape.x_final,
        &tape.inv_f,
        w.final_norm.data(),
        &dn,
        &mut dx,
        g.final_norm.data_mut(),
        d,
    );

    for (l, (lw, lt)) in w.layers.iter().zip(&tape.layers).enumerate().rev() {
        let gl = &mut g.layers[l];

        // Feed-forward block.
        gemm_tn(&lt.act, &dx, gl.w_down.data_mut(), ff, m, d);
        let mut dact = vec![0.0; m * ff];
        gemm_nt(&dx, lw.w_down.data(), &mut dact, m, d, ff);
        let mut dgate = vec![0.0; m * ff];
        let mut dup = vec![0.0; m * ff];
        for i in 0..m * ff {
            let z = lt.gate[i];
            let s = sigmoid(z);
            dup[i] = dact[i] * z * s;
            dgate[i] = dact[i] * lt.up[i] * s * (1.0 + z * (1.0 - s));
        }
        gemm_tn(&lt.n2, &dgate, gl.w_gate.data_mut(), d, m, ff);
        gemm_tn(&lt.n2, &dup, gl.w_up.data_mut(), d, m, ff);
        let mut dn2 = vec![0.0; m * d];
        gemm_nt(&dgate, lw.w_gate.data(), &mut dn2, m, ff, d);
        gemm_nt(&dup, lw.w_up.data(), &mut dn2, m, ff, d);
        let mut dx_mid = dx;
        norm_backward(
            &lt.x_mid,
            &lt.inv2,
            lw.ffn_norm.data(),
            &dn2,
            &mut dx_mid,
            gl.ffn_norm.data_mut(),
            d,
        );

        // Attention block.
        let mut dproj = dx_mid.clone();
        if let Some(mask) = &lt.drop {
            dproj.iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
        }
        gemm_tn(&lt.attn, &dproj, gl.wo.data_mut(), d, m, d);
        let mut dattn = vec![0.0; m * d];
        gemm_nt(&dproj, lw.wo.data(), &mut dattn, m, d, d);

        let mut dq = vec![0.0; m * d];
        let mut dk = vec![0.0; m * d];
        let mut dv = vec![0.0; m * d];
        let mut block = 0;
        for (a, b) in batch.segments() {
            let len = b - a;
            for h in 0..nh {
                let p = &lt.probs[block];
                block += 1;
                let head = |r: usize| (a + r) * d + h * hd..(a + r) * d + (h + 1) * hd;
                let mut ds = vec![0.0; len];
                for i in 0..len {
                    let dout = &dattn[head(i)];
                    let prow = &p[i * len..i * len + i + 1];
                    let mut weighted = 0.0;
                    for j in 0..=i {
                        let vj = &lt.v[head(j)];
                        ds[j] = numerics::dot(dout, vj);
                        weighted += ds[j] * prow[j];
                        if prow[j] != 0.0 {
                            for (o, &dv_) in dv[head(j)].iter_mut().zip(dout) {
                                *o += prow[j] * dv_;
                            }
                        }
                    }
                    for j in 0..=i {
                        let s = prow[j] * (ds[j] - weighted) * scale;
                        if s == 0.0 {
                            continue;
                        }
                        let (qi, kj) = (head(i), head(j));
                        for c in 0..hd {
                            dq[qi.start + c] += s * lt.k[kj.start + c];
                            dk[kj.start + c] += s * lt.q[qi.start + c];
                        }
                    }
                }
            }
            for r in a..b {
                for h in 0..nh {
                    let span = r * d + h * hd..r * d + (h + 1) * hd;
                    rope_inverse_in_place(&mut dq[span.clone()], r - a, config.rope_base);
                    rope_inverse_in_place(&mut dk[span], r - a, config.rope_base);
                }
            }
        }
        gemm_tn(&lt.n1, &dq, gl.wq.data_mut(), d, m, d);
        gemm_tn(&lt.n1, &dk, gl.wk.data_mut(), d, m, d);
        gemm_tn(&lt.n1, &dv, gl.wv.data_mut(), d, m, d);
        let mut dn1 = vec![0.0; m * d];
        gemm_nt(&dq, lw.wq.data(), &mut dn1, m, d, d);
        gemm_nt(&dk, lw.wk.data(), &mut dn1, m, d, d);
        gemm_nt(&dv, lw.wv.data(), &mut dn1, m, d, d);
        dx = dx_mid;
        norm_backward(
            &lt.x_in,
            &lt.inv1,
            lw.attn_norm.data(),
            &dn1,
            &mut dx,
            gl.attn_norm.data_mut(),
            d,
        );
    }

    for (r, &t) in batch.tokens.iter().enumerate() {
        let row = g.tok_embedding.row_mut(t as usize);
        for (gv, dv) in row.iter_mut().zip(&dx[r * d..(r + 1) * d]) {
            *gv += dv;
        }
    }
    g
}

fn check_sequences(config: &ModelConfig, seqs: &[&[u32]]) -> Result<()> {
    if seqs.is_empty() {
        return Err(Error::Length("training corpus is empty".into()));
    }
    for (i, s) in seqs.iter().enumerate() {
        if s.len() < 2 {
            return Err(Error::Length(format!(
                "sequence {i} has {} tokens; at least 2 are needed",
                s.len()
            )));
        }
        if s.len() > config.max_seq {
            return Err(Error::Length(format!(
                "sequence {i} has {} tokens, above max_seq {}",
                s.len(),
                config.max_seq
            )));
        }
        if let Some(&t) = s.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(Error::Config(format!(
                "sequence {i} holds token {t} outside the vocabulary of {}",
                config.vocab_size
            )));
        }
    }
    Ok(())
}

/// Mean next-token loss over `seqs` and the gradient of that mean w.r.t.
/// every parameter, with dropout disabled.
pub fn loss_and_grad(model: &Model, seqs: &[&[u32]]) -> Result<(f64, ModelWeights)> {
    check_sequences(&model.config, seqs)?;
    let batch = Packed::new(seqs);
    let tape = forward_tape(&model.config, &model.weights, &batch, None);
    let (loss, dlogits) = loss_and_dlogits(&batch, &tape.logits, model.config.vocab_size);
    Ok((
        loss,
        backward(&model.config, &model.weights, &batch, &tape, &dlogits),
    ))
}

/// Mean next-token loss over `seqs` in evaluation mode.
pub fn mean_loss(model: &Model, seqs: &[&[u32]]) -> Result<f64> {
    check_sequences(&model.config, seqs)?;
    let batch = Packed::new(seqs);
    let tape = forward_tape(&model.config, &model.weights, &batch, None);
    Ok(loss_and_dlogits(&batch, &tape.logits, model.config.vocab_size).0)
}

enum OptState {
    Sgd,
    Adam {
        m: ModelWeights,
        v: ModelWeights,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

/// Trains a copy of `model` and returns it with the per-step batch loss
/// (measured before each update). Batches are drawn uniformly with
/// replacement from `corpus` using `seed`; dropout masks come from a
/// separate stream of the same seed.
pub fn train(model: &Model, corpus: &[Vec<u32>], cfg: &TrainConfig) -> Result<(Model, Vec<f64>)> {
    train_with_progress(model, corpus, cfg, |_, _| {})
}

/// [`train`] with a callback receiving `(step, loss)` after every step.
pub fn train_with_progress(
    model: &Model,
    corpus: &[Vec<u32>],
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<(Model, Vec<f64>)> {
    cfg.validate()?;
    let refs: Vec<&[u32]> = corpus.iter().map(Vec::as_slice).collect();
    check_sequences(&model.config, &refs)?;
    let config = model.config;
    let mut weights = model.weights.clone();
    let mut sample_rng = Pcg64::seed_from_u64(cfg.seed);
    let mut drop_rng = Pcg64::seed_from_u64(cfg.seed ^ DROPOUT_STREAM);
    let mut state = match cfg.optimizer {
        Optimizer::Sgd => OptState::Sgd,
        Optimizer::Adam { beta1, beta2, eps } => OptState::Adam {
            m: ModelWeights::zeros(&config),
            v: ModelWeights::zeros(&config),
            beta1,
            beta2,
            eps,
        },
    };
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let picked: Vec<&[u32]> = (0..cfg.batch_size)
            .map(|_| refs[sample_rng.random_range(0..refs.len())])
            .collect();
        let batch = Packed::new(&picked);
        let dropout =
            (cfg.attn_output_dropout > 0.0).then_some((cfg.attn_output_dropout, &mut drop_rng));
        let tape = forward_tape(&config, &weights, &batch, dropout);
        let (loss, dlogits) = loss_and_dlogits(&batch, &tape.logits, config.vocab_size);
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let mut grads = backward(&config, &weights, &batch, &tape, &dlogits);
        if let Some(clip) = cfg.grad_clip {
            let norm = grads
                .tensors()
                .iter()
                .flat_map(|t| t.data())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let s = clip / norm;
                for t in grads.tensors_mut() {
                    t.data_mut().iter_mut().for_each(|g| *g *= s);
                }
            }
        }
        let lr = cfg.lr_at(step);
        match &mut state {
            OptState::Sgd => {
                for (p, g) in weights.tensors_mut().into_iter().zip(grads.tensors()) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * gv;
                    }
                }
            }
            OptState::Adam {
                m,
                v,
                beta1,
                beta2,
                eps,
            } => {
                let t = (step + 1) as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let params = weights.tensors_mut();
                let firsts = m.tensors_mut();
                let seconds = v.tensors_mut();
                for (((p, g), mt), vt) in params
                    .into_iter()
                    .zip(grads.tensors())
                    .zip(firsts)
                    .zip(seconds)
                {
                    let it = p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(mt.data_mut().iter_mut())
                        .zip(vt.data_mut().iter_mut());
                    for (((pv, &gv), mv), vv) in it {
                        *mv = *beta1 * *mv + (1.0 - *beta1) * gv;
                        *vv = *beta2 * *vv + (1.0 - *beta2) * gv * gv;
                        *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + *eps);
                    }
                }
            }
        }
        losses.push(loss);
        progress(step, loss);
    }
    if !weights.tensors().iter().all(|t| t.is_finite()) {
        return Err(Error::Divergence {
            step: cfg.steps,
            loss: f64::NAN,
        });
    }
    Ok((Model::new(config, weights)?, losses))
}

/// `step,loss` CSV with one row per step.
pub fn loss_curve_csv(losses: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{i},{l}");
    }
    out
}

pub fn write_loss_curve(path: &Path, losses: &[f64]) -> Result<()> {
    std::fs::write(path, loss_curve_csv(losses))?;
    Ok(())
}

/// Both gradients below this magnitude count as agreeing exactly; above it
/// the relative error is `|a - n| / max(|a|, |n|)`.
pub const GRAD_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub max_rel_error: f64,
    /// Worst relative error per parameter family (`wq`, `lm_head`, ...).
    pub per_family: BTreeMap<String, f64>,
    pub samples: Vec<GradSample>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < GRAD_FLOOR {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares analytic gradients of the mean next-token loss on `tokens`
/// against central differences `(f(θ+ε) - f(θ-ε)) / 2ε` at `n_samples`
/// parameters. Tensors are visited round-robin in manifest order so every
/// tensor (and so every parameter family) is covered once `n_samples`
/// reaches the tensor count; the entry inside each tensor is drawn with
/// `seed`. Dropout plays no part.
pub fn grad_check(
    model: &Model,
    tokens: &[u32],
    epsilon: f64,
    n_samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-4).contains(&epsilon) {
        return Err(Error::Config(format!(
            "finite-difference epsilon must lie in [1e-6, 1e-4], got {epsilon}"
        )));
    }
    let seqs = [tokens];
    let (_, grads) = loss_and_grad(model, &seqs)?;
    let names = ModelWeights::names(&model.config);
    let mut rng = Pcg64::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut samples = Vec::with_capacity(n_samples);
    for s in 0..n_samples {
        let t = s % names.len();
        let len = grads.tensors()[t].len();
        let index = rng.random_range(0..len);
        let analytic = grads.tensors()[t].data()[index];
        let orig = model.weights.tensors()[t].data()[index];
        probe.weights.tensors_mut()[t].data_mut()[index] = orig + epsilon;
        let plus = mean_loss(&probe, &seqs)?;
        probe.weights.tensors_mut()[t].data_mut()[index] = orig - epsilon;
        let minus = mean_loss(&probe, &seqs)?;
        probe.weights.tensors_mut()[t].data_mut()[index] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        samples.push(GradSample {
            name: names[t].clone(),
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let mut per_family: BTreeMap<String, f64> = BTreeMap::new();
    for s in &samples {
        let e = per_family
            .entry(param_family(&s.name).to_string())
            .or_default();
        *e = e.max(s.rel_error);
    }
    Ok(GradCheckReport {
        epsilon,
        max_rel_error: samples.iter().map(|s| s.rel_error).fold(0.0, f64::max),
        per_family,
        samples,
    })
}
