//! Trajectories and datasets, the record type shared by every stage.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rkhs::SamplerConfig;
use crate::systems::{CartPoleParams, ParamRanges, PinkNoiseConfig};
use crate::trajgen::{GenerationStats, TrajGenConfig};

/// Current dataset format version.
pub const DATASET_VERSION: u32 = 1;

/// A finite sequence of `(state, action)` pairs sampled every `dt` seconds.
///
/// States and actions are stored row-major; `len()` pairs of dimension `d_x`
/// and `d_u`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    d_x: usize,
    d_u: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    pub dt: f64,
    pub source_id: String,
}

impl Trajectory {
    pub fn new(
        d_x: usize,
        d_u: usize,
        states: Vec<f64>,
        actions: Vec<f64>,
        dt: f64,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if d_x == 0 {
            return Err(Error::InvalidConfig("trajectory state dimension must be positive".into()));
        }
        if states.len() % d_x != 0 {
            return Err(Error::DimensionMismatch {
                context: "trajectory states",
                expected: d_x,
                found: states.len() % d_x,
            });
        }
        let len = states.len() / d_x;
        if len < 2 {
            return Err(Error::TooShort { needed: 2, found: len });
        }
        if actions.len() != len * d_u {
            return Err(Error::DimensionMismatch {
                context: "trajectory actions",
                expected: len * d_u,
                found: actions.len(),
            });
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidConfig(format!("trajectory dt must be positive, got {dt}")));
        }
        if let Some(i) = states.iter().chain(&actions).position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("trajectory entry {i}")));
        }
        Ok(Self {
            d_x,
            d_u,
            states,
            actions,
            dt,
            source_id: source_id.into(),
        })
    }

    /// Builds from per-step vectors.
    pub fn from_steps(
        states: &[Vec<f64>],
        actions: &[Vec<f64>],
        dt: f64,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        let d_x = states.first().map_or(0, Vec::len);
        let d_u = actions.first().map_or(0, Vec::len);
        if states.len() != actions.len() {
            return Err(Error::DimensionMismatch {
                context: "trajectory steps",
                expected: states.len(),
                found: actions.len(),
            });
        }
        if let Some(bad) = states.iter().find(|s| s.len() != d_x) {
            return Err(Error::DimensionMismatch { context: "trajectory state", expected: d_x, found: bad.len() });
        }
        if let Some(bad) = actions.iter().find(|a| a.len() != d_u) {
            return Err(Error::DimensionMismatch { context: "trajectory action", expected: d_u, found: bad.len() });
        }
        Self::new(d_x, d_u, states.concat(), actions.concat(), dt, source_id)
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn d_u(&self) -> usize {
        self.d_u
    }

    /// Number of `(state, action)` pairs.
    pub fn len(&self) -> usize {
        self.states.len() / self.d_x
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.d_x..(k + 1) * self.d_x]
    }

    pub fn action(&self, k: usize) -> &[f64] {
        &self.actions[k * self.d_u..(k + 1) * self.d_u]
    }

    pub fn states(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.states.chunks_exact(self.d_x)
    }

    pub fn actions(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size.
        (0..self.len()).map(move |k| self.action(k))
    }

    pub fn states_flat(&self) -> &[f64] {
        &self.states
    }

    pub fn actions_flat(&self) -> &[f64] {
        &self.actions
    }

    /// Applies `f` to every state entry; actions and metadata are kept.
    pub fn map_states(&self, mut f: impl FnMut(usize, f64) -> f64) -> Self {
        let mut out = self.clone();
        out.states.iter_mut().enumerate().for_each(|(i, v)| *v = f(i, *v));
        out
    }

    /// Pairs `start..start + len` as a new trajectory.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(Error::TooShort { needed: start + len, found: self.len() });
        }
        Self::new(
            self.d_x,
            self.d_u,
            self.states[start * self.d_x..(start + len) * self.d_x].to_vec(),
            self.actions[start * self.d_u..(start + len) * self.d_u].to_vec(),
            self.dt,
            self.source_id.clone(),
        )
    }
}

/// Where a dataset came from; stored in the dataset header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Rkhs {
        sampler: SamplerConfig,
        trajgen: TrajGenConfig,
        stats: GenerationStats,
        /// Target norms are drawn independently per scalar component.
        norm_targets: String,
    },
    CartpoleFixed {
        params: CartPoleParams,
        init_spread: f64,
        len: usize,
        substeps: usize,
        seed: u64,
    },
    CartpoleRandomized {
        ranges: ParamRanges,
        pink: PinkNoiseConfig,
        init_spread: f64,
        len: usize,
        substeps: usize,
        seed: u64,
    },
    Recorded {
        source: String,
    },
    Subset {
        parent: Box<Provenance>,
        fraction: f64,
        seed: u64,
    },
    Split {
        parent: Box<Provenance>,
        part: String,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub d_x: usize,
    pub d_u: usize,
    pub dt: f64,
    pub count: usize,
    pub provenance: Provenance,
}

/// Manifest plus trajectories with a common `d_x`, `d_u` and `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    d_x: usize,
    d_u: usize,
    dt: f64,
    pub provenance: Provenance,
    trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(
        d_x: usize,
        d_u: usize,
        dt: f64,
        provenance: Provenance,
        trajectories: Vec<Trajectory>,
    ) -> Result<Self> {
        for tr in &trajectories {
            if tr.d_x() != d_x {
                return Err(Error::DimensionMismatch { context: "dataset state dim", expected: d_x, found: tr.d_x() });
            }
            if tr.d_u() != d_u {
                return Err(Error::DimensionMismatch { context: "dataset action dim", expected: d_u, found: tr.d_u() });
            }
            if tr.dt != dt {
                return Err(Error::InvalidConfig(format!(
                    "trajectory {} has dt {} but the dataset has dt {}",
                    tr.source_id, tr.dt, dt
                )));
            }
        }
        Ok(Self {
            d_x,
            d_u,
            dt,
            provenance,
            trajectories,
        })
    }

    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            version: DATASET_VERSION,
            d_x: self.d_x,
            d_u: self.d_u,
            dt: self.dt,
            count: self.trajectories.len(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn d_u(&self) -> usize {
        self.d_u
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn into_trajectories(self) -> Vec<Trajectory> {
        self.trajectories
    }

    /// Same header, different records.
    pub fn with_trajectories(&self, provenance: Provenance, trajectories: Vec<Trajectory>) -> Result<Self> {
        Self::new(self.d_x, self.d_u, self.dt, provenance, trajectories)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn construction_validates() {
        assert!(Trajectory::new(1, 0, vec![1.0], vec![], 0.1, "a").is_err());
        assert!(Trajectory::new(1, 1, vec![1.0, 2.0], vec![0.0], 0.1, "a").is_err());
        assert!(Trajectory::new(1, 0, vec![1.0, f64::NAN], vec![], 0.1, "a").is_err());
        assert!(Trajectory::new(1, 0, vec![1.0, 2.0], vec![], 0.0, "a").is_err());
        let t = Trajectory::new(2, 1, vec![1.0, 2.0, 3.0, 4.0], vec![0.5, 0.6], 0.1, "a").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.state(1), &[3.0, 4.0]);
        assert_eq!(t.action(1), &[0.6]);
        let w = t.window(1, 1);
        assert!(w.is_err(), "single-step windows are not trajectories");
    }

    #[test]
    fn zero_action_dim_iterates() {
        let t = Trajectory::new(1, 0, vec![1.0, 2.0, 3.0], vec![], 0.1, "a").unwrap();
        assert_eq!(t.actions().count(), 3);
        assert!(t.actions().all(|a| a.is_empty()));
    }

    #[test]
    fn dataset_rejects_mixed_dims() {
        let a = Trajectory::new(1, 0, vec![1.0, 2.0], vec![], 0.1, "a").unwrap();
        let b = Trajectory::new(2, 0, vec![1.0, 2.0, 3.0, 4.0], vec![], 0.1, "b").unwrap();
        let prov = Provenance::Recorded { source: "t".into() };
        assert!(Dataset::new(1, 0, 0.1, prov.clone(), vec![a.clone(), b]).is_err());
        let ds = Dataset::new(1, 0, 0.1, prov, vec![a]).unwrap();
        assert_eq!(ds.header().count, 1);
    }
}
