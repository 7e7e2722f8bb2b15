//! Voss–McCartney pink noise.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, domain};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PinkNoiseConfig {
    pub n_rows: usize,
    pub amplitude: f64,
    pub seed: u64,
}

impl Default for PinkNoiseConfig {
    fn default() -> Self {
        Self {
            n_rows: 12,
            amplitude: 1.0,
            seed: 0,
        }
    }
}

/// `len` samples of approximately 1/f noise.
///
/// Row `r` of the generator is redrawn every `2^(r+1)` samples (the row picked
/// at sample `n` is the number of trailing zeros of `n`); each output is the
/// sum of all rows plus a fresh white sample, normalised by `n_rows + 1` and
/// multiplied by `amplitude`. The slow rows give the sequence a random DC
/// offset, so the sample mean is subtracted before returning.
pub fn pink_noise(len: usize, cfg: &PinkNoiseConfig) -> Result<Vec<f64>> {
    if cfg.n_rows < 2 {
        return Err(Error::InvalidConfig("pink noise needs at least 2 rows".into()));
    }
    if !(cfg.amplitude >= 0.0 && cfg.amplitude.is_finite()) {
        return Err(Error::InvalidConfig("pink noise amplitude must be nonnegative".into()));
    }
    if len == 0 {
        return Err(Error::Empty("pink noise length must be at least 1".into()));
    }
    let mut rng = rng::substream(cfg.seed, domain::PINK_NOISE, 0);
    let mut rows: Vec<f64> = (0..cfg.n_rows).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut running: f64 = rows.iter().sum();
    let scale = cfg.amplitude / (cfg.n_rows + 1) as f64;
    let mut out = vec![0.0; len];
    for (n, o) in out.iter_mut().enumerate() {
        let counter = n as u64 + 1;
        let row = counter.trailing_zeros() as usize;
        if row < cfg.n_rows {
            let fresh = rng.random_range(-1.0..1.0);
            running += fresh - rows[row];
            rows[row] = fresh;
        }
        let white: f64 = rng.random_range(-1.0..1.0);
        *o = (running + white) * scale;
    }
    let mean = out.iter().sum::<f64>() / len as f64;
    out.iter_mut().for_each(|v| *v -= mean);
    Ok(out)
}
