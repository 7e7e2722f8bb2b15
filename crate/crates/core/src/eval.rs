//! Horizon MSE, nested data subsets and the aggregated evaluation report.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PredictRequest;
use crate::rng::{self, domain};
use crate::trajectory::{Dataset, Provenance, Trajectory};

/// `(1/m) Σ_t ‖pred_t − truth_t‖²` over row-major `m × d_x` sequences.
pub fn mse_horizon(pred: &[f64], truth: &[f64], d_x: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch { context: "mse_horizon lengths", expected: truth.len(), found: pred.len() });
    }
    if d_x == 0 || pred.len() % d_x != 0 {
        return Err(Error::DimensionMismatch { context: "mse_horizon state dim", expected: d_x, found: pred.len() });
    }
    if pred.is_empty() {
        return Err(Error::Empty("mse_horizon needs at least one step".into()));
    }
    let sq: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sq / (pred.len() / d_x) as f64)
}

fn subset_size(count: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!("subset fraction must lie in (0, 1], got {fraction}")));
    }
    let k = libm::round(fraction * count as f64) as usize;
    if k == 0 {
        return Err(Error::Empty(format!("a {fraction} subset of {count} trajectories is empty")));
    }
    Ok(k)
}

/// Indices of a seeded subset: the first `round(fraction · count)` entries of
/// one permutation per seed, so smaller fractions are nested in larger ones.
/// Returned in ascending order.
pub fn subset_indices(count: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    let k = subset_size(count, fraction)?;
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut rng::substream(seed, domain::SUBSET, 0));
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Uniform seeded sample without replacement; see [`subset_indices`].
pub fn subset(data: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    let idx = subset_indices(data.len(), fraction, seed)?;
    let trs = idx.into_iter().map(|i| data.trajectories()[i].clone()).collect();
    let provenance = Provenance::Subset { parent: Box::new(data.provenance.clone()), fraction, seed };
    data.with_trajectories(provenance, trs)
}

/// Seeded `(train, test)` partition with `round(test_fraction · n)` test
/// trajectories (at least one, and never all).
pub fn train_test_split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("test fraction must lie in (0, 1), got {test_fraction}")));
    }
    let n = data.len();
    if n < 2 {
        return Err(Error::InsufficientData { accepted: n, required: 2, stats: "train/test split".into() });
    }
    let n_test = (libm::round(test_fraction * n as f64) as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::substream(seed, domain::SPLIT, 1));
    let mut test = idx.split_off(n - n_test);
    let mut train = idx;
    train.sort_unstable();
    test.sort_unstable();
    let part = |ids: &[usize], name: &str| {
        let trs = ids.iter().map(|&i| data.trajectories()[i].clone()).collect();
        let provenance = Provenance::Split { parent: Box::new(data.provenance.clone()), part: name.into(), seed };
        data.with_trajectories(provenance, trs)
    };
    Ok((part(&train, "train")?, part(&test, "test")?))
}

/// Mean horizon MSE of `predict` over the first `c + m` pairs of every test
/// trajectory: context `0..c`, truth `c..c + m`.
pub fn evaluate_predictor<F>(test: &[Trajectory], c: usize, m: usize, mut predict: F) -> Result<f64>
where
    F: FnMut(&PredictRequest<'_>) -> Result<Vec<f64>>,
{
    if test.is_empty() {
        return Err(Error::Empty("no test trajectories".into()));
    }
    let mut sum = 0.0;
    for tr in test {
        let req = PredictRequest::from_trajectory(tr, 0, c, m)?;
        let pred = predict(&req)?;
        let truth = &tr.states_flat()[c * tr.d_x()..(c + m) * tr.d_x()];
        sum += mse_horizon(&pred, truth, tr.d_x())?;
    }
    Ok(sum / test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelTag {
    Pre,
    Ft,
    #[serde(rename = "LR")]
    Lr,
    #[serde(rename = "FNN")]
    Fnn,
    #[serde(rename = "ST")]
    St,
}

impl ModelTag {
    pub const ALL: [ModelTag; 5] = [ModelTag::Pre, ModelTag::Ft, ModelTag::Lr, ModelTag::Fnn, ModelTag::St];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelTag::Pre => "Pre",
            ModelTag::Ft => "Ft",
            ModelTag::Lr => "LR",
            ModelTag::Fnn => "FNN",
            ModelTag::St => "ST",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for ModelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One evaluated run. `level` is the percentage of the training data used
/// (0 for zero-shot).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub model: ModelTag,
    pub dataset: String,
    pub level: f64,
    pub seed: u64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub model: ModelTag,
    pub dataset: String,
    pub level: f64,
    pub runs: usize,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    /// `max − min` across runs.
    pub range: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub entries: Vec<EvalEntry>,
    pub aggregates: Vec<Aggregate>,
    /// Seeds of every repeat, for exact reruns.
    pub seeds: Vec<u64>,
    /// Sub-runs that failed; a non-empty list marks the report partial.
    pub failures: Vec<String>,
    pub partial: bool,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Groups entries by `(model, dataset, level)` in order of first appearance.
pub fn aggregate(entries: &[EvalEntry]) -> Vec<Aggregate> {
    let mut keys: Vec<(ModelTag, &str, f64)> = Vec::new();
    for e in entries {
        let key = (e.model, e.dataset.as_str(), e.level);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(model, dataset, level)| {
            let mses: Vec<f64> = entries
                .iter()
                .filter(|e| e.model == model && e.dataset == dataset && e.level == level)
                .map(|e| e.mse)
                .collect();
            let min = mses.iter().copied().fold(f64::INFINITY, f64::min);
            let max = mses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Aggregate {
                model,
                dataset: dataset.into(),
                level,
                runs: mses.len(),
                median: median(&mses).unwrap_or(f64::NAN),
                min,
                max,
                range: max - min,
            }
        })
        .collect()
}

impl EvalReport {
    pub fn new(entries: Vec<EvalEntry>, seeds: Vec<u64>, failures: Vec<String>) -> Self {
        let aggregates = aggregate(&entries);
        let partial = !failures.is_empty();
        Self { entries, aggregates, seeds, failures, partial }
    }

    pub fn find(&self, model: ModelTag, dataset: &str, level: f64) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.model == model && a.dataset == dataset && a.level == level)
    }

    /// Whether the stored aggregates equal a fresh recomputation.
    pub fn is_consistent(&self) -> bool {
        let fresh = aggregate(&self.entries);
        fresh.len() == self.aggregates.len()
            && fresh.iter().zip(&self.aggregates).all(|(a, b)| {
                a.model == b.model
                    && a.dataset == b.dataset
                    && a.level == b.level
                    && a.runs == b.runs
                    && a.median.to_bits() == b.median.to_bits()
                    && a.min.to_bits() == b.min.to_bits()
                    && a.max.to_bits() == b.max.to_bits()
            })
    }
}
