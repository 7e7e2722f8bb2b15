//! Decoder-only transformer predictor.
//!
//! Every input position carries one token `[state | action | flag]` of width
//! `d_x + d_u + 1`. The flag is 1 where the state is unknown: masked context
//! states and the placeholders of the prediction region. Tokens go through a
//! residual-block embedding, learned absolute positions, `n_layers` pre-norm
//! causal decoder blocks, a final layer norm and a residual-block head that
//! emits a patch of two future states per position: position `i` predicts
//! states `i + 1` and `i + 2`.
//!
//! Systems with fewer state or action channels than the model are zero
//! padded; predictions are trimmed back to the caller's dimension.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::tensor::{Graph, ParamSet, Real, Tensor, Var};
use crate::trajectory::Trajectory;

/// States predicted per position.
pub const PATCH_SIZE: usize = 2;
pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// How [`TransformerModel::predict`] assembles the horizon from patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stitching {
    /// One forward pass over context plus placeholders, reading the patch of
    /// every second position starting at the last context position.
    #[default]
    SinglePass,
    /// One pass per patch; predicted states replace the placeholders before
    /// the next pass.
    Iterative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_x: usize,
    pub d_u: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub pred_len: usize,
    pub patch_size: usize,
    pub mask_fraction: f64,
    pub stitching: Stitching,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(2, 1)
    }
}

impl ModelConfig {
    fn preset(d_x: usize, d_u: usize, d_model: usize, n_layers: usize, n_heads: usize) -> Self {
        Self {
            d_x,
            d_u,
            d_model,
            n_layers,
            n_heads,
            d_ff: 4 * d_model,
            context_len: 32,
            pred_len: 32,
            patch_size: PATCH_SIZE,
            mask_fraction: 0.1,
            stitching: Stitching::SinglePass,
            seed: 0,
        }
    }

    /// 4 layers, width 64: trains in minutes on one core.
    pub fn desk(d_x: usize, d_u: usize) -> Self {
        Self::preset(d_x, d_u, 64, 4, 4)
    }

    /// 20 layers, width 120, about 3.5M parameters.
    pub fn large(d_x: usize, d_u: usize) -> Self {
        Self::preset(d_x, d_u, 120, 20, 8)
    }

    /// 8 layers, width 44, about 200k parameters.
    pub fn small(d_x: usize, d_u: usize) -> Self {
        Self::preset(d_x, d_u, 44, 8, 4)
    }

    pub fn d_in(&self) -> usize {
        self.d_x + self.d_u + 1
    }

    pub fn max_len(&self) -> usize {
        self.context_len + self.pred_len
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d_x == 0 {
            return bad("model d_x must be positive".into());
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_ff == 0 {
            return bad("d_ff must be positive".into());
        }
        if self.patch_size != PATCH_SIZE {
            return bad(format!("patch_size must be {PATCH_SIZE}"));
        }
        if self.context_len == 0 || self.pred_len == 0 {
            return bad("context_len and pred_len must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return bad(format!("mask_fraction {} outside [0, 1)", self.mask_fraction));
        }
        Ok(())
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, out) = (self.d_model, self.d_ff, PATCH_SIZE * self.d_x);
        let mut l = Vec::new();
        let res_block = |l: &mut Vec<(String, Vec<usize>)>, prefix: &str, d_in: usize, d_out: usize| {
            for (name, shape) in [
                ("w_skip", vec![d_in, d_out]),
                ("b_skip", vec![d_out]),
                ("w1", vec![d_in, d]),
                ("b1", vec![d]),
                ("w2", vec![d, d_out]),
                ("b2", vec![d_out]),
            ] {
                l.push((format!("{prefix}.{name}"), shape));
            }
        };
        res_block(&mut l, "embed", self.d_in(), d);
        l.push(("pos".into(), vec![self.max_len(), d]));
        for i in 0..self.n_layers {
            for (name, shape) in [
                ("ln1.gamma", vec![d]),
                ("ln1.beta", vec![d]),
                ("attn.w_qkv", vec![d, 3 * d]),
                ("attn.b_qkv", vec![3 * d]),
                ("attn.w_out", vec![d, d]),
                ("attn.b_out", vec![d]),
                ("ln2.gamma", vec![d]),
                ("ln2.beta", vec![d]),
                ("ffn.w1", vec![d, f]),
                ("ffn.b1", vec![f]),
                ("ffn.w2", vec![f, d]),
                ("ffn.b2", vec![d]),
            ] {
                l.push((format!("layers.{i}.{name}"), shape));
            }
        }
        l.push(("final_ln.gamma".into(), vec![d]));
        l.push(("final_ln.beta".into(), vec![d]));
        res_block(&mut l, "head", d, out);
        l
    }

    /// Exact parameter count from the layout's shape products.
    pub fn count_params(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Parameters of a dense layer with bias.
pub fn linear_params(d_in: usize, d_out: usize) -> usize {
    d_in * d_out + d_out
}

const EMBED: usize = 0;
const POS: usize = 6;
const LAYER0: usize = 7;
const PER_LAYER: usize = 12;

/// A sequence of model tokens, `len` rows of `[state | action | flag]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    d_x: usize,
    d_u: usize,
    len: usize,
    data: Vec<f64>,
}

impl TokenSequence {
    /// All-zero states, actions and flags.
    pub fn zeros(d_x: usize, d_u: usize, len: usize) -> Self {
        Self { d_x, d_u, len, data: vec![0.0; len * (d_x + d_u + 1)] }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn d_in(&self) -> usize {
        self.d_x + self.d_u + 1
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.d_in()..(t + 1) * self.d_in()]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Writes an observed state (zero padded) and clears the flag.
    pub fn set_state(&mut self, t: usize, state: &[f64]) {
        let (d_x, w) = (self.d_x, self.d_in());
        let row = &mut self.data[t * w..(t + 1) * w];
        row[..d_x].fill(0.0);
        row[..state.len()].copy_from_slice(state);
        row[w - 1] = 0.0;
    }

    /// Zeroes the state and raises the flag (placeholder or masked input).
    pub fn hide_state(&mut self, t: usize) {
        let (d_x, w) = (self.d_x, self.d_in());
        let row = &mut self.data[t * w..(t + 1) * w];
        row[..d_x].fill(0.0);
        row[w - 1] = 1.0;
    }

    pub fn set_action(&mut self, t: usize, action: &[f64]) {
        let (d_x, d_u, w) = (self.d_x, self.d_u, self.d_in());
        let row = &mut self.data[t * w..(t + 1) * w];
        row[d_x..d_x + d_u].fill(0.0);
        row[d_x..d_x + action.len()].copy_from_slice(action);
    }

    pub fn is_hidden(&self, t: usize) -> bool {
        self.row(t)[self.d_in() - 1] != 0.0
    }
}

/// Number of context positions masked for a given fraction.
pub fn mask_count(context_len: usize, fraction: f64) -> usize {
    (libm::round(fraction * context_len as f64) as usize).min(context_len)
}

/// Hides `round(fraction · context_len)` context positions chosen uniformly
/// without replacement. Returns the masked sequence and the per-position
/// indicator of newly masked positions.
pub fn apply_mask(seq: &TokenSequence, context_len: usize, fraction: f64, seed: u64) -> (TokenSequence, Vec<bool>) {
    let context_len = context_len.min(seq.len());
    let count = mask_count(context_len, fraction);
    let mut out = seq.clone();
    let mut mask = vec![false; seq.len()];
    if count == 0 {
        return (out, mask);
    }
    let mut r = rng::substream(seed, domain::MASK, 0);
    for t in rand::seq::index::sample(&mut r, context_len, count) {
        out.hide_state(t);
        mask[t] = true;
    }
    (out, mask)
}

/// One prediction query, unpadded: `c` context pairs and `m` future actions.
#[derive(Debug, Clone, Copy)]
pub struct PredictRequest<'a> {
    pub d_x: usize,
    pub d_u: usize,
    pub context_states: &'a [f64],
    pub context_actions: &'a [f64],
    pub future_actions: &'a [f64],
}

impl<'a> PredictRequest<'a> {
    /// Context `start..start + c` of a trajectory, followed by the actions of
    /// the next `m` steps.
    pub fn from_trajectory(tr: &'a Trajectory, start: usize, c: usize, m: usize) -> Result<Self> {
        if start + c + m > tr.len() {
            return Err(Error::TooShort { needed: start + c + m, found: tr.len() });
        }
        let (d_x, d_u) = (tr.d_x(), tr.d_u());
        let actions = tr.actions_flat();
        Ok(Self {
            d_x,
            d_u,
            context_states: &tr.states_flat()[start * d_x..(start + c) * d_x],
            context_actions: &actions[start * d_u..(start + c) * d_u],
            future_actions: &actions[(start + c) * d_u..(start + c + m) * d_u],
        })
    }
}

/// The predictor: a configuration plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel<T = f32> {
    config: ModelConfig,
    params: ParamSet<T>,
}

fn layer_norm<T: Real>(g: &mut Graph<T>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let n = g.layer_norm(x, -1, LN_EPS)?;
    let n = g.mul_bias(n, gamma)?;
    g.add_bias(n, beta)
}

/// `W2 · gelu(W1 z + b1) + b2 + (W_skip z + b_skip)`.
fn residual_block<T: Real>(g: &mut Graph<T>, p: &[Var], z: Var) -> Result<Var> {
    let skip = g.linear(z, p[0], p[1])?;
    let h = g.linear(z, p[2], p[3])?;
    let h = g.gelu(h)?;
    let h = g.linear(h, p[4], p[5])?;
    g.add(h, skip)
}

impl<T: Real> TransformerModel<T> {
    /// Seeded initialisation: N(0, 0.02²) weights and positions, zero biases,
    /// unit layer-norm gains.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, INIT_STD).map_err(|e| Error::InvalidConfig(format!("{e}")))?;
        let mut params = ParamSet::new();
        for (i, (name, shape)) in config.layout().into_iter().enumerate() {
            let leaf = name.rsplit('.').next().unwrap_or(&name);
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = if leaf == "gamma" {
                vec![1.0; numel]
            } else if leaf.starts_with('b') {
                vec![0.0; numel]
            } else {
                let mut r = rng::substream(config.seed, domain::PARAM_INIT, i as u64);
                (0..numel).map(|_| normal.sample(&mut r)).collect()
            };
            params.push(name, Tensor::from_f64(shape, &data)?);
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        params.check_layout(&config.layout())?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    pub fn count_params(&self) -> usize {
        self.params.count()
    }

    pub fn cast<U: Real>(&self) -> TransformerModel<U> {
        TransformerModel { config: self.config.clone(), params: self.params.cast() }
    }

    /// Stacks sequences of equal length into a `[B, L, d_in]` tensor.
    pub fn batch_tokens(&self, seqs: &[TokenSequence]) -> Result<Tensor<T>> {
        let Some(first) = seqs.first() else {
            return Err(Error::Empty("no sequences in batch".into()));
        };
        let (len, d_in) = (first.len(), self.config.d_in());
        let mut data = Vec::with_capacity(seqs.len() * len * d_in);
        for s in seqs {
            if s.len() != len || s.d_in() != d_in {
                return Err(Error::Shape {
                    op: "batch_tokens",
                    detail: format!("sequence {}x{} in a batch of {len}x{d_in}", s.len(), s.d_in()),
                });
            }
            data.extend(s.data().iter().map(|&v| T::from_f64(v)));
        }
        Tensor::new([seqs.len(), len, d_in], data)
    }

    /// Hidden states after the final layer norm, `[B, L, d_model]`.
    pub fn trunk(&self, g: &mut Graph<T>, p: &[Var], tokens: Var) -> Result<Var> {
        let cfg = &self.config;
        let shape = g.shape(tokens).to_vec();
        if shape.len() != 3 || shape[2] != cfg.d_in() {
            return Err(Error::Shape {
                op: "forward",
                detail: format!("tokens {shape:?}, expected [batch, len, {}]", cfg.d_in()),
            });
        }
        let (b, l) = (shape[0], shape[1]);
        if l == 0 || l > cfg.max_len() {
            return Err(Error::Shape {
                op: "forward",
                detail: format!("sequence length {l} outside 1..={}", cfg.max_len()),
            });
        }
        let (d, heads) = (cfg.d_model, cfg.n_heads);
        let dh = d / heads;
        let mut h = residual_block(g, &p[EMBED..EMBED + 6], tokens)?;
        let pos = g.slice(p[POS], 0, 0, l)?;
        h = g.add_bias(h, pos)?;
        for i in 0..cfg.n_layers {
            let w = &p[LAYER0 + i * PER_LAYER..LAYER0 + (i + 1) * PER_LAYER];
            let a = layer_norm(g, h, w[0], w[1])?;
            let qkv = g.linear(a, w[2], w[3])?;
            let qkv = g.reshape(qkv, &[b, l, 3, heads, dh])?;
            let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
            let mut qkv_parts = [qkv; 3];
            for (j, part) in qkv_parts.iter_mut().enumerate() {
                let s = g.slice(qkv, 0, j, 1)?;
                *part = g.reshape(s, &[b, heads, l, dh])?;
            }
            let [q, k, v] = qkv_parts;
            let o = g.scaled_dot_product_attention(q, k, v, true)?;
            let o = g.permute(o, &[0, 2, 1, 3])?;
            let o = g.reshape(o, &[b, l, d])?;
            let o = g.linear(o, w[4], w[5])?;
            h = g.add(h, o)?;
            let a = layer_norm(g, h, w[6], w[7])?;
            let f = g.linear(a, w[8], w[9])?;
            let f = g.gelu(f)?;
            let f = g.linear(f, w[10], w[11])?;
            h = g.add(h, f)?;
        }
        let fin = LAYER0 + cfg.n_layers * PER_LAYER;
        layer_norm(g, h, p[fin], p[fin + 1])
    }

    /// Patch predictions `[B, L, 2, d_x]` for bound parameters `p`.
    pub fn forward(&self, g: &mut Graph<T>, p: &[Var], tokens: Var) -> Result<Var> {
        let h = self.trunk(g, p, tokens)?;
        let head = LAYER0 + self.config.n_layers * PER_LAYER + 2;
        let out = residual_block(g, &p[head..head + 6], h)?;
        let s = g.shape(tokens).to_vec();
        g.reshape(out, &[s[0], s[1], PATCH_SIZE, self.config.d_x])
    }

    /// Inference forward pass on a token batch.
    pub fn forward_values(&self, tokens: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let t = g.constant(tokens);
        let out = self.forward(&mut g, &p, t)?;
        Ok(g.value(out).clone())
    }

    /// Embedding of one token (before positions are added).
    pub fn embed(&self, state: &[f64], action: &[f64], masked: bool) -> Result<Vec<f64>> {
        let cfg = &self.config;
        if state.len() > cfg.d_x || action.len() > cfg.d_u {
            return Err(Error::DimensionMismatch {
                context: "embed input",
                expected: cfg.d_x + cfg.d_u,
                found: state.len() + action.len(),
            });
        }
        let mut seq = TokenSequence::zeros(cfg.d_x, cfg.d_u, 1);
        if masked {
            seq.hide_state(0);
        } else {
            seq.set_state(0, state);
        }
        seq.set_action(0, action);
        let mut g = Graph::new();
        let p: Vec<Var> = self.params.tensors()[EMBED..EMBED + 6].iter().map(|t| g.constant(t.clone())).collect();
        let z = g.constant(self.batch_tokens(&[seq])?);
        let e = residual_block(&mut g, &p, z)?;
        Ok(g.value(e).to_f64_vec())
    }

    fn check_request(&self, r: &PredictRequest<'_>) -> Result<()> {
        let cfg = &self.config;
        if r.d_x == 0 || r.d_x > cfg.d_x || r.d_u > cfg.d_u {
            return Err(Error::DimensionMismatch {
                context: "predict dimensions (d_x + d_u) exceed the model's",
                expected: cfg.d_x + cfg.d_u,
                found: r.d_x + r.d_u,
            });
        }
        let c = r.context_states.len() / r.d_x;
        if r.context_states.len() % r.d_x != 0 || c != cfg.context_len {
            return Err(Error::TooShort { needed: cfg.context_len, found: c });
        }
        if r.context_actions.len() != c * r.d_u {
            return Err(Error::DimensionMismatch {
                context: "context actions",
                expected: c * r.d_u,
                found: r.context_actions.len(),
            });
        }
        if r.future_actions.len() != cfg.pred_len * r.d_u {
            return Err(Error::DimensionMismatch {
                context: "future actions",
                expected: cfg.pred_len * r.d_u,
                found: r.future_actions.len(),
            });
        }
        Ok(())
    }

    /// Context states followed by `m` placeholders, all with their actions.
    pub fn encode(&self, r: &PredictRequest<'_>) -> Result<TokenSequence> {
        self.check_request(r)?;
        let cfg = &self.config;
        let (c, m) = (cfg.context_len, cfg.pred_len);
        let mut seq = TokenSequence::zeros(cfg.d_x, cfg.d_u, c + m);
        for t in 0..c {
            seq.set_state(t, &r.context_states[t * r.d_x..(t + 1) * r.d_x]);
            seq.set_action(t, &r.context_actions[t * r.d_u..(t + 1) * r.d_u]);
        }
        for t in 0..m {
            seq.hide_state(c + t);
            seq.set_action(c + t, &r.future_actions[t * r.d_u..(t + 1) * r.d_u]);
        }
        Ok(seq)
    }

    /// Reads `m` states from a forward output by stride-2 patch stitching.
    fn stitch(&self, out: &[T], b: usize, d_x: usize) -> Vec<f64> {
        let cfg = &self.config;
        let (c, m, l, dm) = (cfg.context_len, cfg.pred_len, cfg.max_len(), cfg.d_x);
        let mut pred = Vec::with_capacity(m * d_x);
        for k in 0..m {
            let pos = c - 1 + (k / PATCH_SIZE) * PATCH_SIZE;
            let base = ((b * l + pos) * PATCH_SIZE + k % PATCH_SIZE) * dm;
            pred.extend(out[base..base + d_x].iter().map(|v| v.as_f64()));
        }
        pred
    }

    /// Predicts `m` states for each request; each result is `m × d_x`, row-major.
    pub fn predict_batch(&self, requests: &[PredictRequest<'_>]) -> Result<Vec<Vec<f64>>> {
        if requests.is_empty() {
            return Ok(Vec::new());
        }
        let mut seqs = requests.iter().map(|r| self.encode(r)).collect::<Result<Vec<_>>>()?;
        let out = self.forward_values(self.batch_tokens(&seqs)?)?;
        match self.config.stitching {
            Stitching::SinglePass => {
                Ok(requests.iter().enumerate().map(|(b, r)| self.stitch(out.data(), b, r.d_x)).collect())
            }
            Stitching::Iterative => {
                let cfg = &self.config;
                let (c, m, l, dm) = (cfg.context_len, cfg.pred_len, cfg.max_len(), cfg.d_x);
                let mut preds: Vec<Vec<f64>> = vec![Vec::with_capacity(m * dm); requests.len()];
                let mut out = out;
                let mut k = 0;
                loop {
                    let pos = c - 1 + k;
                    for (b, p) in preds.iter_mut().enumerate() {
                        for slot in 0..PATCH_SIZE.min(m - k) {
                            let base = ((b * l + pos) * PATCH_SIZE + slot) * dm;
                            let state: Vec<f64> = out.data()[base..base + dm].iter().map(|v| v.as_f64()).collect();
                            seqs[b].set_state(c + k + slot, &state);
                            p.extend_from_slice(&state);
                        }
                    }
                    k += PATCH_SIZE;
                    if k >= m {
                        break;
                    }
                    out = self.forward_values(self.batch_tokens(&seqs)?)?;
                }
                Ok(preds
                    .into_iter()
                    .zip(requests)
                    .map(|(p, r)| p.chunks_exact(dm).flat_map(|s| s[..r.d_x].iter().copied()).collect())
                    .collect())
            }
        }
    }

    /// Predicts the `m` states following the context; `m × d_x`, row-major.
    pub fn predict(&self, request: &PredictRequest<'_>) -> Result<Vec<f64>> {
        Ok(self.predict_batch(core::slice::from_ref(request))?.remove(0))
    }
}
