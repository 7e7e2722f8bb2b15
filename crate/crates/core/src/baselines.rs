//! Windowed one-step regressors: linear regression and a 128/64/32 ReLU
//! network, both rolled out iteratively over the prediction horizon.
//!
//! A regressor reads `WINDOW` consecutive `(state, action)` pairs, flattened in
//! time order with the state before the action at every step, and predicts the
//! state after the last pair.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PredictRequest};
use crate::rng::{self, domain};
use crate::tensor::{Graph, ParamSet, Tensor, Var};
use crate::training::{adamw_step_lr, clip_grad_norm, AdamState, TrainConfig};
use crate::trajectory::{Dataset, Trajectory};

pub const WINDOW: usize = 32;
pub const FNN_HIDDEN: [usize; 3] = [128, 64, 32];
pub const DEFAULT_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressorKind {
    Linear,
    Fnn,
}

impl RegressorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RegressorKind::Linear => "linear",
            RegressorKind::Fnn => "fnn",
        }
    }
}

/// Per-feature affine standardisation `(v - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(n: usize) -> Self {
        Self { mean: vec![0.0; n], std: vec![1.0; n] }
    }

    /// Column statistics of row-major `rows` with `n` columns. Constant
    /// columns keep unit scale.
    pub fn fit(rows: &[f64], n: usize) -> Self {
        let count = (rows.len() / n.max(1)).max(1) as f64;
        let mut mean = vec![0.0; n];
        for row in rows.chunks_exact(n) {
            mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; n];
        for row in rows.chunks_exact(n) {
            var.iter_mut().zip(row).zip(&mean).for_each(|((s, &v), &m)| *s += (v - m) * (v - m));
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = libm::sqrt(s / count);
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    fn apply(&self, v: &mut [f64]) {
        for (row, (m, s)) in v.iter_mut().zip(self.mean.iter().zip(&self.std)) {
            *row = (*row - m) / s;
        }
    }

    fn invert(&self, v: &mut [f64]) {
        for (row, (m, s)) in v.iter_mut().zip(self.mean.iter().zip(&self.std)) {
            *row = *row * s + m;
        }
    }
}

/// A fitted one-step predictor over `WINDOW`-pair windows.
///
/// Linear: one `[features, d_x]` weight and a `[d_x]` intercept. FNN: three
/// hidden ReLU layers and a linear head on standardised inputs and outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedRegressor {
    kind: RegressorKind,
    d_x: usize,
    d_u: usize,
    params: ParamSet<f64>,
    input_norm: Standardizer,
    output_norm: Standardizer,
}

/// Parameter shapes of the FNN, in layer order.
pub fn fnn_layout(d_x: usize, d_u: usize) -> Vec<(String, Vec<usize>)> {
    let mut widths = vec![WINDOW * (d_x + d_u)];
    widths.extend(FNN_HIDDEN);
    widths.push(d_x);
    let mut out = Vec::new();
    for (i, w) in widths.windows(2).enumerate() {
        let name = if i == FNN_HIDDEN.len() { String::from("head") } else { format!("hidden{i}") };
        out.push((format!("{name}.w"), vec![w[0], w[1]]));
        out.push((format!("{name}.b"), vec![w[1]]));
    }
    out
}

impl WindowedRegressor {
    pub fn kind(&self) -> RegressorKind {
        self.kind
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn d_u(&self) -> usize {
        self.d_u
    }

    pub fn window(&self) -> usize {
        WINDOW
    }

    pub fn feature_len(&self) -> usize {
        WINDOW * (self.d_x + self.d_u)
    }

    pub fn params(&self) -> &ParamSet<f64> {
        &self.params
    }

    /// Trainable scalars (the standardisation statistics are not counted).
    pub fn count_params(&self) -> usize {
        self.params.count()
    }

    /// For the linear model: the weight of feature `f` on output `i`.
    pub fn linear_weight(&self, feature: usize, output: usize) -> Option<f64> {
        if self.kind != RegressorKind::Linear {
            return None;
        }
        self.params.tensors()[0].data().get(feature * self.d_x + output).copied()
    }

    pub fn linear_intercept(&self) -> Option<&[f64]> {
        (self.kind == RegressorKind::Linear).then(|| self.params.tensors()[1].data())
    }

    /// Parameters plus normalisation statistics, for serialisation.
    pub fn to_param_set(&self) -> ParamSet<f64> {
        let mut all = self.params.clone();
        let push = |all: &mut ParamSet<f64>, name: &str, v: &[f64]| {
            all.push(name, Tensor::new([v.len()], v.to_vec()).expect("1-D shape matches"));
        };
        push(&mut all, "input_norm.mean", &self.input_norm.mean);
        push(&mut all, "input_norm.std", &self.input_norm.std);
        push(&mut all, "output_norm.mean", &self.output_norm.mean);
        push(&mut all, "output_norm.std", &self.output_norm.std);
        all
    }

    /// Inverse of [`to_param_set`](Self::to_param_set).
    pub fn from_param_set(kind: RegressorKind, d_x: usize, d_u: usize, all: ParamSet<f64>) -> Result<Self> {
        let mut layout = match kind {
            RegressorKind::Linear => vec![
                (String::from("weight"), vec![WINDOW * (d_x + d_u), d_x]),
                (String::from("intercept"), vec![d_x]),
            ],
            RegressorKind::Fnn => fnn_layout(d_x, d_u),
        };
        let n_trainable = layout.len();
        let f = WINDOW * (d_x + d_u);
        for (name, n) in [("input_norm.mean", f), ("input_norm.std", f), ("output_norm.mean", d_x), ("output_norm.std", d_x)] {
            layout.push((String::from(name), vec![n]));
        }
        all.check_layout(&layout)?;
        let take = |i: usize| all.tensors()[i].data().to_vec();
        let input_norm = Standardizer { mean: take(n_trainable), std: take(n_trainable + 1) };
        let output_norm = Standardizer { mean: take(n_trainable + 2), std: take(n_trainable + 3) };
        let mut params = ParamSet::new();
        for (name, t) in all.iter().take(n_trainable) {
            params.push(name, t.clone());
        }
        Ok(Self { kind, d_x, d_u, params, input_norm, output_norm })
    }

    /// One-step prediction from a flattened window of `feature_len()` values.
    pub fn predict_features(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.feature_len() {
            return Err(Error::DimensionMismatch {
                context: "regressor features",
                expected: self.feature_len(),
                found: features.len(),
            });
        }
        let mut z = features.to_vec();
        self.input_norm.apply(&mut z);
        let t = self.params.tensors();
        let mut out = match self.kind {
            RegressorKind::Linear => dense(&z, t[0].data(), t[1].data(), self.d_x),
            RegressorKind::Fnn => {
                let mut h = z;
                for layer in 0..FNN_HIDDEN.len() {
                    h = dense(&h, t[2 * layer].data(), t[2 * layer + 1].data(), FNN_HIDDEN[layer]);
                    h.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                let k = FNN_HIDDEN.len();
                dense(&h, t[2 * k].data(), t[2 * k + 1].data(), self.d_x)
            }
        };
        self.output_norm.invert(&mut out);
        Ok(out)
    }
}

/// `x · W + b` for one row.
fn dense(x: &[f64], w: &[f64], b: &[f64], out: usize) -> Vec<f64> {
    let mut y = b.to_vec();
    for (xi, row) in x.iter().zip(w.chunks_exact(out)) {
        y.iter_mut().zip(row).for_each(|(yj, &wij)| *yj += xi * wij);
    }
    y
}

/// Flattens pairs `start..start + WINDOW` of interleaved states and actions.
fn window_features(states: &[f64], actions: &[f64], d_x: usize, d_u: usize, start: usize, out: &mut Vec<f64>) {
    for k in start..start + WINDOW {
        out.extend_from_slice(&states[k * d_x..(k + 1) * d_x]);
        out.extend_from_slice(&actions[k * d_u..(k + 1) * d_u]);
    }
}

/// Every `(window, next state)` example in the trajectories, row-major.
/// Returns `(features, targets, count)`.
pub fn regression_examples(trs: &[Trajectory]) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let (mut xs, mut ys, mut n) = (Vec::new(), Vec::new(), 0);
    for tr in trs {
        let (d_x, d_u) = (tr.d_x(), tr.d_u());
        for start in 0..tr.len().saturating_sub(WINDOW) {
            window_features(tr.states_flat(), tr.actions_flat(), d_x, d_u, start, &mut xs);
            ys.extend_from_slice(tr.state(start + WINDOW));
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::TooShort { needed: WINDOW + 1, found: trs.iter().map(Trajectory::len).max().unwrap_or(0) });
    }
    Ok((xs, ys, n))
}

/// Least squares from windows to next states with an unpenalised intercept,
/// solved through the normal equations `(XᵀX + ridge·I) W = XᵀY` by Cholesky.
pub fn fit_linear(data: &Dataset, ridge: f64) -> Result<WindowedRegressor> {
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidConfig(format!("ridge must be finite and nonnegative, got {ridge}")));
    }
    let (d_x, d_u) = (data.d_x(), data.d_u());
    let (xs, ys, n) = regression_examples(data.trajectories())?;
    let f = WINDOW * (d_x + d_u);
    // Augmented design [X 1].
    let mut gram = DMatrix::<f64>::zeros(f + 1, f + 1);
    let mut rhs = DMatrix::<f64>::zeros(f + 1, d_x);
    const CHUNK: usize = 2048;
    for start in (0..n).step_by(CHUNK) {
        let rows = CHUNK.min(n - start);
        let x = DMatrix::from_fn(rows, f + 1, |r, c| if c == f { 1.0 } else { xs[(start + r) * f + c] });
        let y = DMatrix::from_fn(rows, d_x, |r, c| ys[(start + r) * d_x + c]);
        gram += x.tr_mul(&x);
        rhs += x.tr_mul(&y);
    }
    for i in 0..f {
        gram[(i, i)] += ridge;
    }
    let chol = nalgebra::Cholesky::new(gram).ok_or(Error::Singular)?;
    // A pivot this small relative to the largest means the system is
    // numerically rank deficient.
    let l = chol.l_dirty();
    let diag: Vec<f64> = (0..=f).map(|i| l[(i, i)] * l[(i, i)]).collect();
    let max = diag.iter().copied().fold(0.0, f64::max);
    if ridge == 0.0 && diag.iter().any(|&d| d <= max * 1e-13) {
        return Err(Error::Singular);
    }
    let sol = chol.solve(&rhs);
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular);
    }
    let weight: Vec<f64> = (0..f).flat_map(|r| (0..d_x).map(move |c| (r, c))).map(|(r, c)| sol[(r, c)]).collect();
    let intercept: Vec<f64> = (0..d_x).map(|c| sol[(f, c)]).collect();
    let mut params = ParamSet::new();
    params.push("weight", Tensor::new([f, d_x], weight)?);
    params.push("intercept", Tensor::new([d_x], intercept)?);
    Ok(WindowedRegressor {
        kind: RegressorKind::Linear,
        d_x,
        d_u,
        params,
        input_norm: Standardizer::identity(f),
        output_norm: Standardizer::identity(d_x),
    })
}

/// He-initialised FNN (zero biases), seeded by `seed`.
pub fn init_fnn(d_x: usize, d_u: usize, seed: u64, input_norm: Standardizer, output_norm: Standardizer) -> Result<WindowedRegressor> {
    let mut params = ParamSet::new();
    for (i, (name, shape)) in fnn_layout(d_x, d_u).into_iter().enumerate() {
        let t = if shape.len() == 1 {
            Tensor::zeros(shape)
        } else {
            let gain = if name.starts_with("head") { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, libm::sqrt(gain / shape[0] as f64))
                .map_err(|e| Error::InvalidConfig(format!("{e}")))?;
            let mut r = rng::substream(seed, domain::PARAM_INIT, i as u64);
            let n = shape[0] * shape[1];
            Tensor::new(shape, (0..n).map(|_| normal.sample(&mut r)).collect())?
        };
        params.push(name, t);
    }
    Ok(WindowedRegressor { kind: RegressorKind::Fnn, d_x, d_u, params, input_norm, output_norm })
}

fn fnn_graph(g: &mut Graph<f64>, p: &[Var], x: Var) -> Result<Var> {
    let mut h = x;
    for layer in 0..FNN_HIDDEN.len() {
        h = g.linear(h, p[2 * layer], p[2 * layer + 1])?;
        h = g.relu(h)?;
    }
    let k = FNN_HIDDEN.len();
    g.linear(h, p[2 * k], p[2 * k + 1])
}

/// Mean squared error on standardised targets, with gradients.
fn fnn_loss_and_grads(reg: &WindowedRegressor, x: Tensor<f64>, y: Tensor<f64>) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let p = reg.params.bind(&mut g, true);
    let x = g.constant(x);
    let y = g.constant(y);
    let pred = fnn_graph(&mut g, &p, x)?;
    let diff = g.sub(pred, y)?;
    let sq = g.mul(diff, diff)?;
    let loss = g.mean_all(sq)?;
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("FNN training loss {value}")));
    }
    g.backward(loss)?;
    let grads = p
        .iter()
        .zip(reg.params.tensors())
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    Ok((value, grads))
}

/// Trains the 128/64/32 ReLU network with AdamW on every window of the
/// dataset, standardising inputs and targets with the training statistics.
/// Uses `cfg.lr`, `betas`, `eps`, `weight_decay`, `epochs`, `batch_size`,
/// `grad_clip` and `seed`; augmentation and the validation split do not apply.
/// Returns the regressor and the mean training loss of every epoch.
pub fn fit_fnn(data: &Dataset, cfg: &TrainConfig) -> Result<(WindowedRegressor, Vec<f64>)> {
    cfg.validate()?;
    let (d_x, d_u) = (data.d_x(), data.d_u());
    let (mut xs, mut ys, n) = regression_examples(data.trajectories())?;
    let f = WINDOW * (d_x + d_u);
    let input_norm = Standardizer::fit(&xs, f);
    let output_norm = Standardizer::fit(&ys, d_x);
    xs.chunks_exact_mut(f).for_each(|r| input_norm.apply(r));
    ys.chunks_exact_mut(d_x).for_each(|r| output_norm.apply(r));
    let mut reg = init_fnn(d_x, d_u, cfg.seed, input_norm, output_norm)?;
    let mut state = AdamState::new(&reg.params);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    let total_steps = cfg.epochs * n.div_ceil(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::substream(cfg.seed, domain::SHUFFLE, epoch as u64));
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let bx: Vec<f64> = chunk.iter().flat_map(|&i| xs[i * f..(i + 1) * f].iter().copied()).collect();
            let by: Vec<f64> = chunk.iter().flat_map(|&i| ys[i * d_x..(i + 1) * d_x].iter().copied()).collect();
            let (loss, mut grads) =
                fnn_loss_and_grads(&reg, Tensor::new([chunk.len(), f], bx)?, Tensor::new([chunk.len(), d_x], by)?)?;
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            let lr = cfg.lr * cfg.schedule.factor(state.step as usize, total_steps);
            adamw_step_lr(&mut reg.params, &grads, &mut state, cfg, lr)?;
            sum += loss * chunk.len() as f64;
        }
        history.push(sum / n as f64);
        log::debug!("fnn epoch {epoch}: loss {}", sum / n as f64);
    }
    Ok((reg, history))
}

/// Predicts `m` states by feeding each one-step prediction back into the
/// window together with its known action. Uses the last `WINDOW` context pairs.
pub fn iterative_rollout(reg: &WindowedRegressor, request: &PredictRequest<'_>) -> Result<Vec<f64>> {
    let (d_x, d_u) = (reg.d_x, reg.d_u);
    if request.d_x != d_x || request.d_u != d_u {
        return Err(Error::DimensionMismatch {
            context: "rollout request (d_x + d_u)",
            expected: d_x + d_u,
            found: request.d_x + request.d_u,
        });
    }
    let c = request.context_states.len() / d_x;
    if c < WINDOW {
        return Err(Error::TooShort { needed: WINDOW, found: c });
    }
    if request.context_actions.len() != c * d_u {
        return Err(Error::DimensionMismatch {
            context: "rollout context actions",
            expected: c * d_u,
            found: request.context_actions.len(),
        });
    }
    let m = if d_u == 0 { 0 } else { request.future_actions.len() / d_u };
    if d_u > 0 && request.future_actions.len() % d_u != 0 {
        return Err(Error::DimensionMismatch {
            context: "rollout future actions",
            expected: d_u,
            found: request.future_actions.len() % d_u,
        });
    }
    if m < 1 {
        return Err(Error::InvalidConfig("rollout horizon must be at least one step".into()));
    }
    let mut states = request.context_states[(c - WINDOW) * d_x..].to_vec();
    let mut actions = request.context_actions[(c - WINDOW) * d_u..].to_vec();
    actions.extend_from_slice(request.future_actions);
    let mut out = Vec::with_capacity(m * d_x);
    let mut features = Vec::with_capacity(reg.feature_len());
    for step in 0..m {
        features.clear();
        window_features(&states, &actions, d_x, d_u, step, &mut features);
        let next = reg.predict_features(&features)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { step });
        }
        out.extend_from_slice(&next);
        states.extend_from_slice(&next);
    }
    Ok(out)
}

/// The 8-layer, roughly 200k-parameter transformer trained from scratch.
pub fn small_transformer_config(d_x: usize, d_u: usize) -> ModelConfig {
    ModelConfig::small(d_x, d_u)
}
