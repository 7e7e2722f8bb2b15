//! AdamW, the patched MSE objective, augmentations and the train loop shared by
//! pretraining and fine-tuning.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{apply_mask, PredictRequest, TransformerModel, PATCH_SIZE};
use crate::rng::{self, domain};
use crate::tensor::gradcheck::{self, GradCheckConfig, GradCheckReport};
use crate::tensor::{Graph, ParamSet, Real, Tensor, Var};
use crate::trajectory::{Dataset, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugConfig {
    /// Range of the per-trajectory state scale α (pretraining).
    pub scale_range: (f64, f64),
    /// Range of the per-trajectory state shift β (pretraining).
    pub shift_range: (f64, f64),
    /// Standard deviation of the iid state noise (fine-tuning).
    pub noise_std: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self { scale_range: (0.5, 1.5), shift_range: (-1.0, 1.0), noise_std: 0.01 }
    }
}

impl AugConfig {
    /// No augmentation at all.
    pub fn identity() -> Self {
        Self { scale_range: (1.0, 1.0), shift_range: (0.0, 0.0), noise_std: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ok(self.scale_range) || !ok(self.shift_range) {
            return Err(Error::InvalidConfig("augmentation ranges need min <= max".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidConfig("noise_std must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: Option<f64>,
    pub phase: Phase,
    pub aug: AugConfig,
    /// Fraction of trajectories held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
    pub schedule: LrSchedule,
}

/// Learning-rate multiplier over the optimizer steps of one run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to zero at the last step.
    Cosine,
}

impl LrSchedule {
    /// Multiplier for 0-based `step` out of `total` steps.
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine if total <= 1 => 1.0,
            LrSchedule::Cosine => {
                let t = step.min(total - 1) as f64 / (total - 1) as f64;
                0.5 * (1.0 + libm::cos(core::f64::consts::PI * t))
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
            epochs: 10,
            batch_size: 64,
            grad_clip: Some(1.0),
            phase: Phase::Pretrain,
            aug: AugConfig::default(),
            val_fraction: 0.1,
            seed: 0,
            schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(0.0 < b1 && b1 < b2 && b2 < 1.0) {
            return Err(Error::InvalidConfig(format!("betas {:?} must satisfy 0 < b1 < b2 < 1", self.betas)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be finite and nonnegative", self.lr)));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("eps must be positive and weight_decay nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::InvalidConfig("grad_clip must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig("val_fraction must lie in [0, 1)".into()));
        }
        self.aug.validate()
    }

    /// The standard fine-tuning recipe derived from a pretraining config:
    /// a tenth of the learning rate and a fifth of the epochs.
    pub fn finetune_recipe(&self) -> Self {
        Self {
            lr: self.lr * 0.1,
            epochs: (self.epochs / 5).max(usize::from(self.epochs > 0)),
            phase: Phase::Finetune,
            ..self.clone()
        }
    }
}

/// Logs a warning when a fine-tuning config is not "smaller" than the
/// pretraining one it follows. Returns whether the recipe holds.
pub fn check_finetune_recipe(finetune: &TrainConfig, pretrain: &TrainConfig) -> bool {
    let ok = finetune.lr <= pretrain.lr && finetune.epochs <= pretrain.epochs;
    if !ok {
        log::warn!(
            "fine-tuning with lr {} over {} epochs exceeds pretraining (lr {}, {} epochs)",
            finetune.lr,
            finetune.epochs,
            pretrain.lr,
            pretrain.epochs
        );
    }
    ok
}

/// First and second moment estimates of AdamW.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![T::zero(); t.numel()]).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }
}

/// One AdamW update with bias correction and decoupled weight decay:
/// `p ← p − lr·(m̂/(√v̂ + eps) + wd·p)`.
pub fn adamw_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    adamw_step_lr(params, grads, state, cfg, cfg.lr)
}

/// [`adamw_step`] with the learning rate given explicitly, for schedules.
pub fn adamw_step_lr<T: Real>(
    params: &mut ParamSet<T>,
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::DimensionMismatch { context: "adamw tensors", expected: params.len(), found: grads.len() });
    }
    for ((name, t), g) in params.iter().zip(grads) {
        if g.len() != t.numel() {
            return Err(Error::DimensionMismatch { context: "adamw gradient", expected: t.numel(), found: g.len() });
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}[{i}] is {}", g[i])));
        }
    }
    state.step += 1;
    let (b1, b2) = (T::from_f64(cfg.betas.0), T::from_f64(cfg.betas.1));
    let c1 = T::one() - T::from_f64(libm::pow(cfg.betas.0, state.step as f64));
    let c2 = T::one() - T::from_f64(libm::pow(cfg.betas.1, state.step as f64));
    let (lr, eps, wd) = (T::from_f64(lr), T::from_f64(cfg.eps), T::from_f64(cfg.weight_decay));
    for (k, t) in params.tensors_mut().iter_mut().enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (((p, &g), mi), vi) in t.data_mut().iter_mut().zip(&grads[k]).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (T::one() - b1) * g;
            *vi = b2 * *vi + (T::one() - b2) * g * g;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *p -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
        }
    }
    Ok(())
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().flatten().map(|g| g.as_f64() * g.as_f64()).sum::<f64>());
    if norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// MSE over the entries where `valid` is nonzero, as a graph node.
pub fn masked_mse_node<T: Real>(g: &mut Graph<T>, pred: Var, target: Tensor<T>, valid: Tensor<T>) -> Result<Var> {
    let count: f64 = valid.data().iter().map(|v| v.as_f64()).sum();
    if count == 0.0 {
        return Err(Error::Empty("loss has no valid entries".into()));
    }
    let t = g.constant(target);
    let w = g.constant(valid);
    let d = g.sub(pred, t)?;
    let sq = g.mul(d, d)?;
    let sq = g.mul(sq, w)?;
    let s = g.sum_all(sq)?;
    g.scale(s, T::from_f64(1.0 / count))
}

/// MSE over the entries where `valid` is true.
pub fn masked_mse(pred: &[f64], target: &[f64], valid: &[bool]) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != valid.len() {
        return Err(Error::DimensionMismatch { context: "loss inputs", expected: pred.len(), found: target.len() });
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for ((p, t), _) in pred.iter().zip(target).zip(valid).filter(|(_, &v)| v) {
        sum += (p - t) * (p - t);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("loss has no valid entries".into()));
    }
    Ok(sum / n as f64)
}

fn uniform(r: &mut rng::Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        r.random_range(lo..=hi)
    }
}

/// `x' = α x + β` with one `(α, β)` per trajectory drawn uniformly.
pub fn augment_pretrain(tr: &Trajectory, cfg: &AugConfig, seed: u64) -> Trajectory {
    let mut r = rng::substream(seed, domain::AUGMENT, 0);
    let alpha = uniform(&mut r, cfg.scale_range);
    let beta = uniform(&mut r, cfg.shift_range);
    if alpha == 1.0 && beta == 0.0 {
        return tr.clone();
    }
    tr.map_states(|_, x| alpha * x + beta)
}

/// Adds iid `N(0, σ²)` noise to every state entry.
pub fn augment_finetune(tr: &Trajectory, cfg: &AugConfig, seed: u64) -> Trajectory {
    if cfg.noise_std == 0.0 {
        return tr.clone();
    }
    let mut r = rng::substream(seed, domain::AUGMENT, 1);
    let normal = Normal::new(0.0, cfg.noise_std).expect("validated noise_std");
    tr.map_states(|_, x| x + normal.sample(&mut r))
}

/// Model inputs, patch targets and their validity for a batch of windows.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub tokens: Tensor<T>,
    pub targets: Tensor<T>,
    pub valid: Tensor<T>,
}

/// Builds a training batch from windows of exactly `c + m` pairs. The inputs
/// match prediction-time inputs (context then placeholders); `masks` lists
/// extra context positions to hide per window. Position `i`, slot `s` targets
/// state `i + 1 + s`; slots past the window and padded channels are invalid.
pub fn build_batch<T: Real>(
    model: &TransformerModel<T>,
    windows: &[Trajectory],
    mask_seeds: Option<&[u64]>,
) -> Result<Batch<T>> {
    let cfg = model.config();
    let (c, m, l, dm) = (cfg.context_len, cfg.pred_len, cfg.max_len(), cfg.d_x);
    let mut seqs = Vec::with_capacity(windows.len());
    let mut targets = vec![T::zero(); windows.len() * l * PATCH_SIZE * dm];
    let mut valid = vec![T::zero(); targets.len()];
    for (b, w) in windows.iter().enumerate() {
        if w.len() != l {
            return Err(Error::TooShort { needed: l, found: w.len() });
        }
        let req = PredictRequest::from_trajectory(w, 0, c, m)?;
        let mut seq = model.encode(&req)?;
        if let Some(seeds) = mask_seeds {
            seq = apply_mask(&seq, c, cfg.mask_fraction, seeds[b]).0;
        }
        seqs.push(seq);
        for i in 0..l {
            for s in 0..PATCH_SIZE {
                let k = i + 1 + s;
                if k >= l {
                    continue;
                }
                let base = ((b * l + i) * PATCH_SIZE + s) * dm;
                for (ch, &x) in w.state(k).iter().enumerate() {
                    targets[base + ch] = T::from_f64(x);
                    valid[base + ch] = T::one();
                }
            }
        }
    }
    let shape = [windows.len(), l, PATCH_SIZE, dm];
    Ok(Batch { tokens: model.batch_tokens(&seqs)?, targets: Tensor::new(shape, targets)?, valid: Tensor::new(shape, valid)? })
}

/// Loss and parameter gradients for one batch.
pub fn loss_and_grads<T: Real>(model: &TransformerModel<T>, batch: Batch<T>) -> Result<(f64, Vec<Vec<T>>)> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, true);
    let tokens = g.constant(batch.tokens);
    let pred = model.forward(&mut g, &p, tokens)?;
    let loss = masked_mse_node(&mut g, pred, batch.targets, batch.valid)?;
    let value = g.value(loss).item()?.as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss {value}")));
    }
    g.backward(loss)?;
    let grads = p
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![T::zero(); t.numel()], <[T]>::to_vec))
        .collect();
    Ok((value, grads))
}

/// Central finite-difference check of the gradient of the training loss on
/// `batch` with respect to every parameter tensor.
pub fn check_loss_gradients(
    model: &TransformerModel<f64>,
    batch: &Batch<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    gradcheck::check(model.params().tensors(), cfg, |g, p| {
        let tokens = g.constant(batch.tokens.clone());
        let pred = model.forward(g, p, tokens)?;
        masked_mse_node(g, pred, batch.targets.clone(), batch.valid.clone())
    })
}

/// Mean loss over windows without augmentation or masking.
pub fn evaluate_loss<T: Real>(model: &TransformerModel<T>, windows: &[Trajectory], batch_size: usize) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0.0);
    for chunk in windows.chunks(batch_size.max(1)) {
        let batch = build_batch(model, chunk, None)?;
        let n: f64 = batch.valid.data().iter().map(|v| v.as_f64()).sum();
        let out = model.forward_values(batch.tokens)?;
        for ((p, t), w) in out.data().iter().zip(batch.targets.data()).zip(batch.valid.data()) {
            let d = p.as_f64() - t.as_f64();
            sum += w.as_f64() * d * d;
        }
        count += n;
    }
    if count == 0.0 {
        return Err(Error::Empty("no validation windows".into()));
    }
    Ok(sum / count)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochLoss>,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
    pub steps: u64,
}

impl TrainReport {
    pub fn losses(&self, split: Split) -> Vec<f64> {
        self.history.iter().filter(|e| e.split == split).map(|e| e.loss).collect()
    }
}

/// Receives the model after every epoch (checkpointing lives outside the core).
pub trait EpochObserver<T> {
    fn on_epoch(&mut self, epoch: usize, model: &TransformerModel<T>, losses: &[EpochLoss], is_best: bool) -> Result<()>;
}

impl<T> EpochObserver<T> for () {
    fn on_epoch(&mut self, _: usize, _: &TransformerModel<T>, _: &[EpochLoss], _: bool) -> Result<()> {
        Ok(())
    }
}

/// Seeded split of `n` items into `(train, val)` index lists. Validation gets
/// `round(fraction · n)` items, but never all of them.
pub fn train_val_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::substream(seed, domain::SPLIT, 0));
    let n_val = (libm::round(fraction * n as f64) as usize).min(n.saturating_sub(1));
    let train = idx.split_off(n_val);
    (train, idx)
}

/// Cuts one window of `len` pairs from each trajectory; the start is drawn
/// uniformly when the trajectory is longer.
fn sample_windows(trs: &[(usize, &Trajectory)], len: usize, seed: u64) -> Result<Vec<Trajectory>> {
    trs.iter()
        .map(|&(i, tr)| {
            if tr.len() < len {
                return Err(Error::TooShort { needed: len, found: tr.len() });
            }
            if tr.len() == len {
                return Ok(tr.clone());
            }
            let start = rng::substream(seed, domain::WINDOW, i as u64).random_range(0..=tr.len() - len);
            tr.window(start, len)
        })
        .collect()
}

fn check_dataset<T: Real>(model: &TransformerModel<T>, data: &Dataset) -> Result<()> {
    let cfg = model.config();
    if data.d_x() > cfg.d_x || data.d_u() > cfg.d_u {
        return Err(Error::DimensionMismatch {
            context: "dataset dimensions (d_x + d_u) exceed the model's",
            expected: cfg.d_x + cfg.d_u,
            found: data.d_x() + data.d_u(),
        });
    }
    if data.is_empty() {
        return Err(Error::Empty("training dataset is empty".into()));
    }
    Ok(())
}

/// The train loop: per epoch, shuffle, augment, mask, step; then score the
/// validation split. On a non-finite loss or gradient the parameters of the
/// last completed epoch are restored and the error is returned.
pub fn train<T: Real>(
    model: &mut TransformerModel<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn EpochObserver<T>,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_dataset(model, data)?;
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok(report);
    }
    let l = model.config().max_len();
    let trs = data.trajectories();
    let (train_idx, val_idx) = train_val_split(trs.len(), cfg.val_fraction, cfg.seed);
    let val_windows = sample_windows(&val_idx.iter().map(|&i| (i, &trs[i])).collect::<Vec<_>>(), l, rng::mix(cfg.seed, u64::MAX))?;
    let mut state = AdamState::new(model.params());
    let total_steps = cfg.epochs * train_idx.len().div_ceil(cfg.batch_size);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let good = model.params().clone();
        let epoch_seed = rng::mix(cfg.seed, epoch as u64);
        let mut order = train_idx.clone();
        order.shuffle(&mut rng::substream(cfg.seed, domain::SHUFFLE, epoch as u64));
        let (mut loss_sum, mut n_seen) = (0.0, 0usize);
        let result: Result<()> = (|| {
            for chunk in order.chunks(cfg.batch_size) {
                let selected: Vec<(usize, &Trajectory)> = chunk.iter().map(|&i| (i, &trs[i])).collect();
                let windows = sample_windows(&selected, l, epoch_seed)?;
                let windows: Vec<Trajectory> = windows
                    .iter()
                    .zip(chunk)
                    .map(|(w, &i)| {
                        let s = rng::mix(epoch_seed, i as u64);
                        match cfg.phase {
                            Phase::Pretrain => augment_pretrain(w, &cfg.aug, s),
                            Phase::Finetune => augment_finetune(w, &cfg.aug, s),
                        }
                    })
                    .collect();
                let seeds: Vec<u64> = chunk.iter().map(|&i| rng::mix(epoch_seed ^ 0x5A5A, i as u64)).collect();
                let batch = build_batch(model, &windows, Some(&seeds))?;
                let (loss, mut grads) = loss_and_grads(model, batch)?;
                if let Some(c) = cfg.grad_clip {
                    clip_grad_norm(&mut grads, c);
                }
                let lr = cfg.lr * cfg.schedule.factor(step, total_steps);
                adamw_step_lr(model.params_mut(), &grads, &mut state, cfg, lr)?;
                step += 1;
                loss_sum += loss * chunk.len() as f64;
                n_seen += chunk.len();
            }
            Ok(())
        })();
        if let Err(e) = result {
            *model.params_mut() = good;
            return Err(e);
        }
        report.steps = state.step;
        report.history.push(EpochLoss { epoch, split: Split::Train, loss: loss_sum / n_seen.max(1) as f64 });
        let mut is_best = false;
        if !val_windows.is_empty() {
            let v = evaluate_loss(model, &val_windows, cfg.batch_size)?;
            if !v.is_finite() {
                *model.params_mut() = good;
                return Err(Error::NonFinite(format!("validation loss {v} at epoch {epoch}")));
            }
            report.history.push(EpochLoss { epoch, split: Split::Val, loss: v });
            if report.best_val.is_none_or(|b| v < b) {
                report.best_val = Some(v);
                report.best_epoch = Some(epoch);
                is_best = true;
            }
        }
        log::info!("epoch {epoch}: {:?}", &report.history[report.history.len().saturating_sub(2)..]);
        observer.on_epoch(epoch, model, &report.history, is_best)?;
    }
    Ok(report)
}

fn ensure_phase(cfg: &TrainConfig, phase: Phase) -> Result<()> {
    if cfg.phase != phase {
        return Err(Error::InvalidConfig(format!("expected a {phase:?} config, got {:?}", cfg.phase)));
    }
    Ok(())
}

/// Pretraining with scale/shift augmentation.
pub fn pretrain<T: Real>(
    model: &mut TransformerModel<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn EpochObserver<T>,
) -> Result<TrainReport> {
    ensure_phase(cfg, Phase::Pretrain)?;
    train(model, data, cfg, observer)
}

/// Fine-tuning with Gaussian-noise augmentation.
pub fn finetune<T: Real>(
    model: &mut TransformerModel<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn EpochObserver<T>,
) -> Result<TrainReport> {
    ensure_phase(cfg, Phase::Finetune)?;
    train(model, data, cfg, observer)
}

/// Human-readable loss history, one `epoch,split,loss` line per entry.
pub fn history_csv(history: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,split,loss\n");
    for e in history {
        s.push_str(&format!("{},{},{:e}\n", e.epoch, e.split.as_str(), e.loss));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::trajectory::Provenance;
    use crate::trajgen::total_variation;

    fn one_param(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push("w", Tensor::new([1], vec![v]).unwrap());
        p
    }

    #[test]
    fn adamw_first_step_by_hand() {
        let cfg = TrainConfig { lr: 1e-3, weight_decay: 0.0, ..Default::default() };
        let mut p = one_param(0.5);
        let mut st = AdamState::new(&p);
        adamw_step(&mut p, &[vec![1.0]], &mut st, &cfg).unwrap();
        assert!((st.m[0][0] - 0.1).abs() < 1e-15);
        assert!((st.v[0][0] - 0.001).abs() < 1e-15);
        let want = 0.5 - 1e-3 * (1.0 / (1.0 + 1e-8));
        assert!((p.tensors()[0].data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let c = LrSchedule::Cosine;
        assert_eq!(c.factor(0, 11), 1.0);
        assert!((c.factor(5, 11) - 0.5).abs() < 1e-15);
        assert!(c.factor(10, 11).abs() < 1e-15);
        assert!((0..10).all(|i| c.factor(i + 1, 11) <= c.factor(i, 11)));
        assert_eq!(c.factor(0, 1), 1.0);
        assert_eq!(LrSchedule::Constant.factor(7, 11), 1.0);
    }

    #[test]
    fn adamw_zero_lr_and_pure_decay() {
        let cfg = TrainConfig { lr: 0.0, ..Default::default() };
        let mut p = one_param(0.5);
        let mut st = AdamState::new(&p);
        adamw_step(&mut p, &[vec![2.0]], &mut st, &cfg).unwrap();
        assert_eq!(p.tensors()[0].data()[0], 0.5);
        assert!(st.m[0][0] != 0.0 && st.v[0][0] != 0.0);

        let cfg = TrainConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut p = one_param(2.0);
        let mut st = AdamState::new(&p);
        adamw_step(&mut p, &[vec![0.0]], &mut st, &cfg).unwrap();
        assert!((p.tensors()[0].data()[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn adamw_without_decay_is_adam() {
        let cfg = TrainConfig { lr: 1e-2, weight_decay: 0.0, ..Default::default() };
        let mut p = one_param(0.3);
        let mut st = AdamState::new(&p);
        let (mut q, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
        for t in 1..=50 {
            let g = libm::sin(t as f64) * q;
            adamw_step(&mut p, &[vec![g]], &mut st, &cfg).unwrap();
            m = 0.9 * m + (1.0 - 0.9) * g;
            v = 0.999 * v + (1.0 - 0.999) * g * g;
            let m_hat = m / (1.0 - libm::pow(0.9, t as f64));
            let v_hat = v / (1.0 - libm::pow(0.999, t as f64));
            q -= 1e-2 * (m_hat / (libm::sqrt(v_hat) + 1e-8));
            assert_eq!(p.tensors()[0].data()[0].to_bits(), q.to_bits());
        }
    }

    #[test]
    fn adamw_rejects_bad_gradients() {
        let cfg = TrainConfig::default();
        let mut p = one_param(0.5);
        let mut st = AdamState::new(&p);
        assert!(matches!(adamw_step(&mut p, &[vec![f64::NAN]], &mut st, &cfg), Err(Error::NonFinite(_))));
        assert!(adamw_step(&mut p, &[vec![1.0, 2.0]], &mut st, &cfg).is_err());
        assert_eq!(st.step, 0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0f64], vec![4.0]];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn loss_examples() {
        assert_eq!(masked_mse(&[1.0, 2.0], &[1.0, 2.0], &[true, true]).unwrap(), 0.0);
        assert_eq!(masked_mse(&[1.0], &[3.0], &[true]).unwrap(), 4.0);
        assert!(masked_mse(&[1.0], &[3.0], &[false]).is_err());
        let p = [1.0, 5.0, -2.0, 0.5];
        let t = [0.0, 1.0, 2.0, 3.0];
        let half = masked_mse(&p, &t, &[true, false, true, false]).unwrap();
        assert_eq!(half, masked_mse(&[1.0, -2.0], &[0.0, 2.0], &[true, true]).unwrap());
    }

    fn line(states: &[f64]) -> Trajectory {
        Trajectory::new(1, 1, states.to_vec(), vec![0.25; states.len()], 0.1, "x").unwrap()
    }

    #[test]
    fn pretrain_augmentation() {
        let tr = line(&[0.0, 1.0]);
        let id = AugConfig::identity();
        assert_eq!(augment_pretrain(&tr, &id, 3), tr);
        let fixed = AugConfig { scale_range: (2.0, 2.0), shift_range: (1.0, 1.0), ..id };
        assert_eq!(augment_pretrain(&tr, &fixed, 3).states_flat(), &[1.0, 3.0]);
        let tr = line(&[0.3, -1.0, 2.0, 2.5]);
        let aug = augment_pretrain(&tr, &AugConfig::default(), 11);
        let alpha = (aug.state(1)[0] - aug.state(0)[0]) / (tr.state(1)[0] - tr.state(0)[0]);
        assert!((total_variation(&aug) - alpha.abs() * total_variation(&tr)).abs() < 1e-12);
        assert_eq!(aug.actions_flat(), tr.actions_flat());
        assert_eq!(aug.len(), tr.len());
    }

    #[test]
    fn finetune_noise_statistics() {
        let n = 100_000;
        let tr = line(&vec![1.0; n]);
        let cfg = AugConfig { noise_std: 0.3, ..AugConfig::identity() };
        let aug = augment_finetune(&tr, &cfg, 4);
        let d: Vec<f64> = aug.states_flat().iter().map(|x| x - 1.0).collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let std = libm::sqrt(d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64);
        assert!((std / 0.3 - 1.0).abs() < 0.02, "{std}");
        assert_eq!(aug.actions_flat(), tr.actions_flat());
        assert_eq!(augment_finetune(&tr, &AugConfig::identity(), 4), tr);
    }

    #[test]
    fn recipe_defaults() {
        let pre = TrainConfig { epochs: 10, ..Default::default() };
        let ft = pre.finetune_recipe();
        assert_eq!(ft.lr, pre.lr * 0.1);
        assert_eq!(ft.epochs, 2);
        assert_eq!(ft.phase, Phase::Finetune);
        assert!(check_finetune_recipe(&ft, &pre));
        assert!(!check_finetune_recipe(&TrainConfig { lr: 1.0, ..ft }, &pre));
    }

    #[test]
    fn split_is_seeded_partition() {
        let (tr, va) = train_val_split(50, 0.1, 3);
        assert_eq!(va.len(), 5);
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(train_val_split(50, 0.1, 3), (tr, va));
        assert_eq!(train_val_split(1, 0.5, 0).1.len(), 0);
    }

    fn toy_model() -> TransformerModel<f64> {
        TransformerModel::new(ModelConfig {
            d_x: 2,
            d_u: 1,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            context_len: 4,
            pred_len: 4,
            seed: 1,
            ..Default::default()
        })
        .unwrap()
    }

    fn toy_data(n: usize) -> Dataset {
        let trs: Vec<Trajectory> = (0..n)
            .map(|i| {
                let s: Vec<f64> = (0..10).flat_map(|k| {
                    let t = k as f64 * 0.2 + i as f64;
                    [libm::sin(t), libm::cos(t)]
                }).collect();
                Trajectory::new(2, 1, s, vec![0.0; 10], 0.1, "toy").unwrap()
            })
            .collect();
        Dataset::new(2, 1, 0.1, Provenance::Recorded { source: "toy".into() }, trs).unwrap()
    }

    #[test]
    fn batch_targets_and_validity() {
        let m = toy_model();
        let data = toy_data(1);
        let w = data.trajectories()[0].window(0, 8).unwrap();
        let b = build_batch(&m, &[w.clone()], None).unwrap();
        assert_eq!(b.targets.shape(), &[1, 8, 2, 2]);
        // Position 3, slot 1 targets state 5.
        assert_eq!(&b.targets.data()[(3 * 2 + 1) * 2..(3 * 2 + 1) * 2 + 2], w.state(5));
        let valid: f64 = b.valid.data().iter().sum();
        assert_eq!(valid, ((7 + 6) * 2) as f64);
    }

    #[test]
    fn batch_order_does_not_change_loss() {
        let m = toy_model();
        let data = toy_data(3);
        let ws: Vec<Trajectory> = data.trajectories().iter().map(|t| t.window(1, 8).unwrap()).collect();
        let (a, _) = loss_and_grads(&m, build_batch(&m, &ws, None).unwrap()).unwrap();
        let rev: Vec<Trajectory> = ws.iter().rev().cloned().collect();
        let (b, _) = loss_and_grads(&m, build_batch(&m, &rev, None).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn zero_epochs_and_determinism() {
        let data = toy_data(12);
        let mut m = toy_model();
        let cfg = TrainConfig { epochs: 0, batch_size: 4, ..Default::default() };
        let r = train(&mut m, &data, &cfg, &mut ()).unwrap();
        assert!(r.history.is_empty());
        assert_eq!(m, toy_model());

        let cfg = TrainConfig { epochs: 3, batch_size: 4, lr: 1e-2, val_fraction: 0.25, ..Default::default() };
        let mut a = toy_model();
        let ra = train(&mut a, &data, &cfg, &mut ()).unwrap();
        let mut b = toy_model();
        let rb = train(&mut b, &data, &cfg, &mut ()).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        assert_eq!(ra.losses(Split::Train).len(), 3);
        assert_eq!(ra.losses(Split::Val).len(), 3);
        assert!(ra.history.iter().all(|e| e.loss.is_finite()));
        assert!(finetune(&mut b, &data, &cfg, &mut ()).is_err());
    }

    #[test]
    fn history_csv_header() {
        let h = [EpochLoss { epoch: 0, split: Split::Train, loss: 0.5 }];
        assert_eq!(history_csv(&h), "epoch,split,loss\n0,train,5e-1\n");
    }
}
