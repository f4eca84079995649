use crate::error::{Error, Result};
use crate::model::attention::{AttentionHook, AttentionRecord};
use crate::model::config::ModelConfig;
use crate::model::Model;
use crate::numerics::{self, gemm, log_sum_exp, rms_norm_into, rope_in_place, Tensor};

/// Rotated keys and values of an already-processed prefix, one buffer per
/// layer (`len × d_model`, row-major).
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    tokens: Vec<u32>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl KvCache {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            tokens: Vec::new(),
            keys: vec![Vec::new(); config.n_layers],
            values: vec![Vec::new(); config.n_layers],
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn clear(&mut self) {
        self.truncate(0, 0);
    }

    fn truncate(&mut self, len: usize, d_model: usize) {
        self.tokens.truncate(len);
        for buf in self.keys.iter_mut().chain(self.values.iter_mut()) {
            buf.truncate(len * d_model);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Absolute position of the first processed row.
    pub row_offset: usize,
    /// `rows × vocab` logits, one row per processed position.
    pub logits: Tensor,
    /// One record per (layer, head) when capture was requested, layer-major.
    pub records: Vec<AttentionRecord>,
}

impl ForwardOutput {
    /// Logits for the token following the last input position.
    pub fn next_token_logits(&self) -> Tensor {
        let last = self.logits.rows() - 1;
        Tensor::vector(self.logits.row(last).to_vec()).expect("vocab >= 1")
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl Model {
    /// Runs the positions of `tokens` not yet covered by `cache` (all of
    /// them without a cache). With a hook, every layer's post-softmax scores
    /// pass through it before the value mixing; captured records are the
    /// scores actually used.
    pub fn forward(
        &self,
        tokens: &[u32],
        cache: Option<&mut KvCache>,
        capture: bool,
        hook: Option<&mut dyn AttentionHook>,
    ) -> Result<ForwardOutput> {
        self.check_tokens(tokens)?;
        match cache {
            Some(cache) => {
                let start = cache.len();
                if tokens.len() <= start || tokens[..start] != cache.tokens[..] {
                    return Err(Error::State(format!(
                        "cache holds {start} tokens that are not a strict prefix of the {}-token input",
                        tokens.len()
                    )));
                }
                let out = self.forward_rows(tokens, start, Some(cache), capture, hook);
                match out {
                    Ok(o) => {
                        cache.tokens.extend_from_slice(&tokens[start..]);
                        Ok(o)
                    }
                    Err(e) => {
                        cache.truncate(start, self.config.d_model);
                        Err(e)
                    }
                }
            }
            None => self.forward_rows(tokens, 0, None, capture, hook),
        }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Length("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::Length(format!(
                "sequence of {} tokens exceeds max_seq {}",
                tokens.len(),
                self.config.max_seq
            )));
        }
        if let Some(&bad) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::Config(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn forward_rows(
        &self,
        tokens: &[u32],
        start: usize,
        mut cache: Option<&mut KvCache>,
        capture: bool,
        mut hook: Option<&mut dyn AttentionHook>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let w = &self.weights;
        let (d, hd, nh, ff) = (cfg.d_model, cfg.head_dim(), cfg.n_heads, cfg.d_ff);
        let n = tokens.len();
        let rows = n - start;
        let scale = 1.0 / (hd as f64).sqrt();

        let mut x = vec![0.0; rows * d];
        for (r, &t) in tokens[start..].iter().enumerate() {
            x[r * d..(r + 1) * d].copy_from_slice(w.tok_embedding.row(t as usize));
        }

        let mut records_out = Vec::new();
        let mut normed = vec![0.0; rows * d];

        for (l, lw) in w.layers.iter().enumerate() {
            for r in 0..rows {
                rms_norm_into(
                    &x[r * d..(r + 1) * d],
                    lw.attn_norm.data(),
                    cfg.norm_eps,
                    &mut normed[r * d..(r + 1) * d],
                );
            }
            let mut q = vec![0.0; rows * d];
            let mut k = vec![0.0; rows * d];
            let mut v = vec![0.0; rows * d];
            gemm(&normed, lw.wq.data(), &mut q, rows, d, d);
            gemm(&normed, lw.wk.data(), &mut k, rows, d, d);
            gemm(&normed, lw.wv.data(), &mut v, rows, d, d);
            for r in 0..rows {
                for h in 0..nh {
                    let span = r * d + h * hd..r * d + (h + 1) * hd;
                    rope_in_place(&mut q[span.clone()], start + r, cfg.rope_base);
                    rope_in_place(&mut k[span], start + r, cfg.rope_base);
                }
            }

            let local_k: Vec<f64>;
            let local_v: Vec<f64>;
            let (keys, values): (&[f64], &[f64]) = match cache.as_deref_mut() {
                Some(c) => {
                    c.keys[l].extend_from_slice(&k);
                    c.values[l].extend_from_slice(&v);
                    (&c.keys[l], &c.values[l])
                }
                None => {
                    local_k = k;
                    local_v = v;
                    (&local_k, &local_v)
                }
            };

            let mut heads = Vec::with_capacity(nh);
            for h in 0..nh {
                let mut scores = Tensor::zeros(&[rows, n]);
                for r in 0..rows {
                    let i = start + r;
                    let qh = &q[r * d + h * hd..r * d + (h + 1) * hd];
                    let row = &mut scores.row_mut(r)[..=i];
                    for (j, s) in row.iter_mut().enumerate() {
                        *s = numerics::dot(qh, &keys[j * d + h * hd..j * d + (h + 1) * hd]) * scale;
                    }
                    numerics::softmax_in_place(row);
                }
                heads.push(AttentionRecord::new(l, h, start, scores)?);
            }
            if let Some(hk) = hook.as_deref_mut() {
                hk.on_layer(l, &mut heads)?;
            }

            let mut attn = vec![0.0; rows * d];
            for rec in &heads {
                let h = rec.head;
                for r in 0..rows {
                    let out = &mut attn[r * d + h * hd..r * d + (h + 1) * hd];
                    for (j, &p) in rec.scores.row(r).iter().enumerate() {
                        if p == 0.0 {
                            continue;
                        }
                        let vj = &values[j * d + h * hd..j * d + (h + 1) * hd];
                        for (o, &vv) in out.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
            if capture {
                records_out.extend(heads);
            }

            let mut proj = vec![0.0; rows * d];
            gemm(&attn, lw.wo.data(), &mut proj, rows, d, d);
            for (xv, pv) in x.iter_mut().zip(&proj) {
                *xv += pv;
            }

            for r in 0..rows {
                rms_norm_into(
                    &x[r * d..(r + 1) * d],
                    lw.ffn_norm.data(),
                    cfg.norm_eps,
                    &mut normed[r * d..(r + 1) * d],
                );
            }
            let mut gate = vec![0.0; rows * ff];
            let mut up = vec![0.0; rows * ff];
            gemm(&normed, lw.w_gate.data(), &mut gate, rows, d, ff);
            gemm(&normed, lw.w_up.data(), &mut up, rows, d, ff);
            for (g, u) in gate.iter_mut().zip(&up) {
                *g = silu(*g) * u;
            }
            let mut down = vec![0.0; rows * d];
            gemm(&gate, lw.w_down.data(), &mut down, rows, ff, d);
            for (xv, dv) in x.iter_mut().zip(&down) {
                *xv += dv;
            }
        }

        for r in 0..rows {
            rms_norm_into(
                &x[r * d..(r + 1) * d],
                w.final_norm.data(),
                cfg.norm_eps,
                &mut normed[r * d..(r + 1) * d],
            );
        }
        let mut logits = vec![0.0; rows * cfg.vocab_size];
        gemm(
            &normed,
            w.lm_head.data(),
            &mut logits,
            rows,
            d,
            cfg.vocab_size,
        );

        Ok(ForwardOutput {
            row_offset: start,
            logits: Tensor::new(vec![rows, cfg.vocab_size], logits)?,
            records: records_out,
        })
    }

    /// Zero-temperature decoding. Appends the argmax token (lowest id on
    /// ties) until a stop token is produced, `max_new` tokens have been
    /// generated, or the sequence reaches `max_seq`. Stop tokens are kept
    /// in the output. Returns the full sequence and the generated count.
    pub fn generate_greedy(
        &self,
        prompt: &[u32],
        max_new: usize,
        stop: &[u32],
        mut hook: Option<&mut dyn AttentionHook>,
    ) -> Result<(Vec<u32>, usize)> {
        if prompt.is_empty() {
            return Err(Error::Length("empty prompt".into()));
        }
        self.check_tokens(prompt)?;
        let mut tokens = prompt.to_vec();
        let mut cache = KvCache::new(&self.config);
        let mut generated = 0;
        while generated < max_new && tokens.len() < self.config.max_seq {
            let out = self.forward(&tokens, Some(&mut cache), false, reborrow(&mut hook))?;
            let last = out.logits.rows() - 1;
            let next = argmax(out.logits.row(last)) as u32;
            tokens.push(next);
            generated += 1;
            if stop.contains(&next) {
                break;
            }
        }
        Ok((tokens, generated))
    }

    /// Sum of `-ln p(tokens[t+1] | tokens[..=t])` and the number of terms.
    pub fn negative_log_likelihood(
        &self,
        tokens: &[u32],
        hook: Option<&mut dyn AttentionHook>,
    ) -> Result<(f64, usize)> {
        if tokens.len() < 2 {
            return Err(Error::Length(format!(
                "perplexity needs at least 2 tokens, got {}",
                tokens.len()
            )));
        }
        let out = self.forward(tokens, None, false, hook)?;
        let mut nll = 0.0;
        for t in 0..tokens.len() - 1 {
            let row = out.logits.row(t);
            nll += log_sum_exp(row) - row[tokens[t + 1] as usize];
        }
        Ok((nll, tokens.len() - 1))
    }

    /// `exp` of the mean next-token negative log-likelihood.
    pub fn perplexity(&self, tokens: &[u32], hook: Option<&mut dyn AttentionHook>) -> Result<f64> {
        let (nll, n) = self.negative_log_likelihood(tokens, hook)?;
        Ok((nll / n as f64).exp())
    }
}

/// Shortens the trait-object lifetime so an optional hook can be lent out
/// once per loop iteration.
pub(crate) fn reborrow<'a>(
    hook: &'a mut Option<&mut dyn AttentionHook>,
) -> Option<&'a mut dyn AttentionHook> {
    match hook {
        Some(h) => Some(&mut **h),
        None => None,
    }
}

#[inline]
pub(crate) fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}
