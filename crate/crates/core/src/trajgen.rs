//! Synthetic pretraining data: sample fields, integrate, select, balance.
//!
//! The recipe for `N` candidates is: draw a vector field and rescale its
//! components to target norms, integrate one trajectory per field with
//! explicit Euler from a uniform initial state, keep trajectories whose total
//! variation is inside `[tv_min, tv_max]` and whose context and prediction
//! parts have total variations within `δ` of each other, then cap the number
//! of survivors per total-variation bin.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rkhs::{SamplerConfig, VectorField};
use crate::rng::{self, domain};
use crate::trajectory::{Dataset, Provenance, Trajectory};

/// States with a component beyond this magnitude count as diverged.
pub const BLOW_UP_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajGenConfig {
    pub dt: f64,
    /// `T`; a trajectory holds `T + 1` states.
    pub horizon_steps: usize,
    /// Initial-state box, one `(min, max)` per state dimension, or a single
    /// pair applied to every dimension.
    pub init_box: Vec<(f64, f64)>,
    pub process_noise_std: f64,
    pub tv_min: f64,
    pub tv_max: f64,
    pub delta: f64,
    pub context_len: usize,
    pub pred_len: usize,
    pub n_bins: usize,
    /// Per-bin cap; `None` means `ceil(n_functions / n_bins)`.
    pub bin_cap: Option<usize>,
    pub n_functions: usize,
    /// Action dimension of the (all-zero) recorded actions.
    pub d_u: usize,
    /// Fewer accepted trajectories than this is an error.
    pub min_accepted: usize,
    pub seed: u64,
}

impl Default for TrajGenConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            horizon_steps: 63,
            init_box: vec![(-4.0, 4.0)],
            process_noise_std: 0.0,
            tv_min: 0.5,
            tv_max: 20.0,
            delta: 15.0,
            context_len: 32,
            pred_len: 32,
            n_bins: 20,
            bin_cap: None,
            n_functions: 1000,
            d_u: 1,
            min_accepted: 1,
            seed: 0,
        }
    }
}

impl TrajGenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return fail(format!("dt must be positive, got {}", self.dt));
        }
        if self.horizon_steps == 0 || self.context_len == 0 || self.pred_len == 0 {
            return fail("horizon_steps, context_len and pred_len must be positive".into());
        }
        if self.context_len + self.pred_len > self.horizon_steps + 1 {
            return fail(format!(
                "context_len + pred_len = {} exceeds the {} generated states",
                self.context_len + self.pred_len,
                self.horizon_steps + 1
            ));
        }
        if !(self.tv_min >= 0.0 && self.tv_min < self.tv_max) {
            return fail(format!("need 0 <= tv_min < tv_max, got [{}, {}]", self.tv_min, self.tv_max));
        }
        if !(self.delta > 0.0 && self.delta < self.tv_max - self.tv_min) {
            return fail(format!(
                "delta must be in (0, tv_max - tv_min = {}), got {}",
                self.tv_max - self.tv_min,
                self.delta
            ));
        }
        if !(self.process_noise_std >= 0.0) {
            return fail("process_noise_std must be nonnegative".into());
        }
        if self.n_bins == 0 || self.n_functions == 0 || self.bin_cap == Some(0) {
            return fail("n_bins, n_functions and bin_cap must be positive".into());
        }
        if self.init_box.is_empty() || self.init_box.iter().any(|(lo, hi)| !(lo <= hi)) {
            return fail("init_box needs at least one (min, max) pair with min <= max".into());
        }
        Ok(())
    }

    pub fn effective_bin_cap(&self) -> usize {
        self.bin_cap.unwrap_or_else(|| self.n_functions.div_ceil(self.n_bins)).max(1)
    }

    fn init_range(&self, dim: usize) -> (f64, f64) {
        if self.init_box.len() == 1 {
            self.init_box[0]
        } else {
            self.init_box[dim]
        }
    }

    /// Uniform initial state for candidate `index`.
    pub fn initial_state(&self, d_x: usize, index: usize) -> Result<Vec<f64>> {
        if self.init_box.len() != 1 && self.init_box.len() != d_x {
            return Err(Error::DimensionMismatch {
                context: "init_box",
                expected: d_x,
                found: self.init_box.len(),
            });
        }
        let mut rng = rng::substream(self.seed, domain::INITIAL_STATE, index as u64);
        Ok((0..d_x)
            .map(|j| {
                let (lo, hi) = self.init_range(j);
                if lo == hi {
                    lo
                } else {
                    rng.random_range(lo..hi)
                }
            })
            .collect())
    }
}

/// Integrates `x_{k+1} = x_k + Δt·f(x_k) + ε_k` for `horizon_steps` steps.
///
/// `index` selects the process-noise substream. Actions are zero vectors of
/// dimension `cfg.d_u`.
pub fn euler_rollout<F: VectorField + ?Sized>(
    field: &F,
    x0: &[f64],
    cfg: &TrajGenConfig,
    index: usize,
) -> Result<Trajectory> {
    let d = field.dim();
    if x0.len() != d {
        return Err(Error::DimensionMismatch {
            context: "euler_rollout x0",
            expected: d,
            found: x0.len(),
        });
    }
    let steps = cfg.horizon_steps + 1;
    let mut noise = (cfg.process_noise_std > 0.0)
        .then(|| rng::substream(cfg.seed, domain::PROCESS_NOISE, index as u64));
    let mut states = Vec::with_capacity(steps * d);
    states.extend_from_slice(x0);
    let mut deriv = vec![0.0; d];
    for k in 0..cfg.horizon_steps {
        let x = &states[k * d..(k + 1) * d];
        field.eval_into(x, &mut deriv);
        let mut next: Vec<f64> = x.iter().zip(&deriv).map(|(xi, fi)| xi + cfg.dt * fi).collect();
        if let Some(rng) = noise.as_mut() {
            for v in &mut next {
                let z: f64 = StandardNormal.sample(rng);
                *v += cfg.process_noise_std * z;
            }
        }
        if next.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP_LIMIT) {
            return Err(Error::BlowUp { step: k + 1 });
        }
        states.extend_from_slice(&next);
    }
    Trajectory::new(d, cfg.d_u, states, vec![0.0; steps * cfg.d_u], cfg.dt, format!("euler-{index}"))
}

/// Sum of Euclidean distances between consecutive states.
pub fn total_variation_of<'a>(states: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    let mut it = states.into_iter();
    let Some(mut prev) = it.next() else {
        return 0.0;
    };
    let mut tv = 0.0;
    for s in it {
        let d2: f64 = s.iter().zip(prev).map(|(a, b)| (a - b) * (a - b)).sum();
        tv += libm::sqrt(d2);
        prev = s;
    }
    tv
}

/// `TV(x) = Σ ‖x_k − x_{k−1}‖` over the states (actions are ignored).
pub fn total_variation(tr: &Trajectory) -> f64 {
    total_variation_of(tr.states())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Accept,
    RejectTvRange,
    RejectDelta,
}

/// Total variation filter. The context part is states `[0, c)` and the
/// prediction part states `[c, c + m)`.
pub fn accept_trajectory(tr: &Trajectory, cfg: &TrajGenConfig) -> Result<Decision> {
    let (c, m) = (cfg.context_len, cfg.pred_len);
    if tr.len() < c + m {
        return Err(Error::TooShort { needed: c + m, found: tr.len() });
    }
    let tv = total_variation(tr);
    if !(cfg.tv_min <= tv && tv <= cfg.tv_max) {
        return Ok(Decision::RejectTvRange);
    }
    let ctx = total_variation_of(tr.states().take(c));
    let pred = total_variation_of(tr.states().skip(c).take(m));
    if (ctx - pred).abs() > cfg.delta {
        return Ok(Decision::RejectDelta);
    }
    Ok(Decision::Accept)
}

/// Bin index of a total variation in `[tv_min, tv_max]`, `n_bins` equal bins.
pub fn tv_bin(tv: f64, cfg: &TrajGenConfig) -> usize {
    let width = (cfg.tv_max - cfg.tv_min) / cfg.n_bins as f64;
    let raw = libm::floor((tv - cfg.tv_min) / width);
    if raw <= 0.0 {
        0
    } else {
        (raw as usize).min(cfg.n_bins - 1)
    }
}

/// Keeps at most `effective_bin_cap()` trajectories per bin, chosen uniformly
/// at random per bin; survivors keep their input order.
pub fn bin_and_downsample(trs: Vec<Trajectory>, cfg: &TrajGenConfig) -> Vec<Trajectory> {
    let cap = cfg.effective_bin_cap();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_bins];
    for (i, tr) in trs.iter().enumerate() {
        members[tv_bin(total_variation(tr), cfg)].push(i);
    }
    let mut keep = vec![false; trs.len()];
    for (b, idx) in members.iter_mut().enumerate() {
        if idx.len() > cap {
            let mut rng = rng::substream(cfg.seed, domain::BINNING, b as u64);
            // Partial Fisher-Yates: the first `cap` slots become a uniform sample.
            for i in 0..cap {
                let j = rng.random_range(i..idx.len());
                idx.swap(i, j);
            }
            idx.truncate(cap);
        }
        for &i in idx.iter() {
            keep[i] = true;
        }
    }
    trs.into_iter().zip(keep).filter_map(|(t, k)| k.then_some(t)).collect()
}

/// Counts per outcome; stored in dataset provenance.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub candidates: usize,
    pub sampling_failed: usize,
    pub blow_up: usize,
    pub reject_tv_range: usize,
    pub reject_delta: usize,
    pub accepted: usize,
    pub downsampled: usize,
    pub retained: usize,
}

impl core::fmt::Display for GenerationStats {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(
            f,
            "candidates={} sampling_failed={} blow_up={} reject_tv_range={} reject_delta={} accepted={} downsampled={} retained={}",
            self.candidates,
            self.sampling_failed,
            self.blow_up,
            self.reject_tv_range,
            self.reject_delta,
            self.accepted,
            self.downsampled,
            self.retained
        )
    }
}

/// What happened to one candidate function.
#[derive(Debug, Clone, PartialEq)]
pub enum CandidateOutcome {
    Accepted(Trajectory),
    SamplingFailed,
    BlowUp { step: usize },
    Rejected(Decision),
}

/// Samples, integrates and filters candidate `index`. Independent across
/// indices, so callers may evaluate candidates in any order or in parallel.
pub fn generate_candidate(scfg: &SamplerConfig, tcfg: &TrajGenConfig, index: usize) -> Result<CandidateOutcome> {
    let field_cfg = SamplerConfig {
        seed: rng::mix(scfg.seed, index as u64),
        ..scfg.clone()
    };
    let field = match field_cfg.sample_vector_field() {
        Ok(f) => f,
        Err(Error::ZeroNorm | Error::IndefiniteGram { .. }) => return Ok(CandidateOutcome::SamplingFailed),
        Err(e) => return Err(e),
    };
    let x0 = tcfg.initial_state(scfg.d_x, index)?;
    let mut tr = match euler_rollout(&field, &x0, tcfg, index) {
        Ok(t) => t,
        Err(Error::BlowUp { step }) => return Ok(CandidateOutcome::BlowUp { step }),
        Err(e) => return Err(e),
    };
    tr.source_id = format!("rkhs-{}-{}", scfg.seed, index);
    Ok(match accept_trajectory(&tr, tcfg)? {
        Decision::Accept => CandidateOutcome::Accepted(tr),
        d => CandidateOutcome::Rejected(d),
    })
}

/// Tallies candidate outcomes (in index order), bins, and builds the dataset.
pub fn assemble_dataset(
    scfg: &SamplerConfig,
    tcfg: &TrajGenConfig,
    outcomes: impl IntoIterator<Item = CandidateOutcome>,
) -> Result<Dataset> {
    let mut stats = GenerationStats::default();
    let mut accepted = Vec::new();
    for o in outcomes {
        stats.candidates += 1;
        match o {
            CandidateOutcome::Accepted(t) => accepted.push(t),
            CandidateOutcome::SamplingFailed => stats.sampling_failed += 1,
            CandidateOutcome::BlowUp { .. } => stats.blow_up += 1,
            CandidateOutcome::Rejected(Decision::RejectTvRange) => stats.reject_tv_range += 1,
            CandidateOutcome::Rejected(Decision::RejectDelta) => stats.reject_delta += 1,
            CandidateOutcome::Rejected(Decision::Accept) => unreachable!("accepted candidates carry a trajectory"),
        }
    }
    stats.accepted = accepted.len();
    if stats.accepted < tcfg.min_accepted {
        return Err(Error::InsufficientData {
            accepted: stats.accepted,
            required: tcfg.min_accepted,
            stats: format!("{stats}"),
        });
    }
    let kept = bin_and_downsample(accepted, tcfg);
    stats.retained = kept.len();
    stats.downsampled = stats.accepted - stats.retained;
    let provenance = Provenance::Rkhs {
        sampler: scfg.clone(),
        trajgen: tcfg.clone(),
        stats,
        norm_targets: "independent per component".into(),
    };
    Dataset::new(scfg.d_x, tcfg.d_u, tcfg.dt, provenance, kept)
}

/// Runs the full generation recipe serially.
pub fn generate_dataset(scfg: &SamplerConfig, tcfg: &TrajGenConfig) -> Result<Dataset> {
    scfg.validate()?;
    tcfg.validate()?;
    let outcomes = (0..tcfg.n_functions)
        .map(|i| generate_candidate(scfg, tcfg, i))
        .collect::<Result<Vec<_>>>()?;
    assemble_dataset(scfg, tcfg, outcomes)
}
