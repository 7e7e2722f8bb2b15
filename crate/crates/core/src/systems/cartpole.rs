//! Frictionless cart-pole with a uniform pole, integrated with RK4.
//!
//! State `(x, ẋ, θ, θ̇)` with `θ = 0` upright. With `M = m_c + m_p`, half
//! length `l` and force `F = force_scale · u`:
//!
//! ```text
//! a  = (F + m_p l θ̇² sin θ) / M
//! θ̈ = (g sin θ − a cos θ) / (l (4/3 − m_p cos² θ / M))
//! ẍ  = a − m_p l θ̈ cos θ / M
//! ```

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::pink::{pink_noise, PinkNoiseConfig};
use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::trajectory::{Dataset, Provenance, Trajectory};
use crate::trajgen::BLOW_UP_LIMIT;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CartPoleParams {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub pole_half_length: f64,
    pub gravity: f64,
    /// Newtons per unit action.
    pub force_scale: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        Self {
            cart_mass: 1.0,
            pole_mass: 0.1,
            pole_half_length: 0.5,
            gravity: 9.81,
            force_scale: 1.0,
        }
    }
}

impl CartPoleParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.cart_mass, self.pole_mass, self.pole_half_length, self.gravity, self.force_scale];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("cart-pole parameters must be positive: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CartPoleState {
    pub cart_pos: f64,
    pub cart_vel: f64,
    pub pole_angle: f64,
    pub pole_ang_vel: f64,
}

impl CartPoleState {
    pub fn to_array(self) -> [f64; 4] {
        [self.cart_pos, self.cart_vel, self.pole_angle, self.pole_ang_vel]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            cart_pos: a[0],
            cart_vel: a[1],
            pole_angle: a[2],
            pole_ang_vel: a[3],
        }
    }
}

/// `(ẋ, ẍ, θ̇, θ̈)`.
pub fn cartpole_derivative(s: CartPoleState, u: f64, p: &CartPoleParams) -> [f64; 4] {
    let total = p.cart_mass + p.pole_mass;
    let (sin, cos) = libm::sincos(s.pole_angle);
    let l = p.pole_half_length;
    let a = (u * p.force_scale + p.pole_mass * l * s.pole_ang_vel * s.pole_ang_vel * sin) / total;
    let theta_acc = (p.gravity * sin - cos * a) / (l * (4.0 / 3.0 - p.pole_mass * cos * cos / total));
    let x_acc = a - p.pole_mass * l * theta_acc * cos / total;
    [s.cart_vel, x_acc, s.pole_ang_vel, theta_acc]
}

/// Kinetic plus potential energy, zero potential at the pivot height.
pub fn mechanical_energy(s: CartPoleState, p: &CartPoleParams) -> f64 {
    let total = p.cart_mass + p.pole_mass;
    let l = p.pole_half_length;
    let cos = libm::cos(s.pole_angle);
    0.5 * total * s.cart_vel * s.cart_vel
        + p.pole_mass * l * s.cart_vel * s.pole_ang_vel * cos
        + (2.0 / 3.0) * p.pole_mass * l * l * s.pole_ang_vel * s.pole_ang_vel
        + p.pole_mass * p.gravity * l * cos
}

fn rk4_step(s: [f64; 4], u: f64, p: &CartPoleParams, h: f64) -> [f64; 4] {
    let f = |x: [f64; 4]| cartpole_derivative(CartPoleState::from_array(x), u, p);
    let add = |x: [f64; 4], k: [f64; 4], c: f64| core::array::from_fn(|i| x[i] + c * k[i]);
    let k1 = f(s);
    let k2 = f(add(s, k1, h / 2.0));
    let k3 = f(add(s, k2, h / 2.0));
    let k4 = f(add(s, k3, h));
    core::array::from_fn(|i| s[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

/// Simulates one trajectory with one state per action.
///
/// `actions[k]` is held for `dt` after state `k`; the final action is recorded
/// but never applied. Each interval is split into `substeps` RK4 steps.
pub fn simulate_cartpole(
    x0: CartPoleState,
    actions: &[f64],
    p: &CartPoleParams,
    dt: f64,
    substeps: usize,
) -> Result<Trajectory> {
    p.validate()?;
    if substeps == 0 {
        return Err(Error::InvalidConfig("substeps must be at least 1".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidConfig(format!("dt must be positive, got {dt}")));
    }
    let mut states = Vec::with_capacity(actions.len() * 4);
    let mut s = x0.to_array();
    let h = dt / substeps as f64;
    for (k, &u) in actions.iter().enumerate() {
        if s.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP_LIMIT) {
            return Err(Error::BlowUp { step: k });
        }
        states.extend_from_slice(&s);
        if k + 1 < actions.len() {
            for _ in 0..substeps {
                s = rk4_step(s, u, p, h);
            }
        }
    }
    Trajectory::new(4, 1, states, actions.to_vec(), dt, "cartpole")
}

/// Uniform ranges for randomized parameters; `min == max` pins a value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRanges {
    pub cart_mass: (f64, f64),
    pub pole_mass: (f64, f64),
    pub pole_half_length: (f64, f64),
    pub gravity: (f64, f64),
    pub force_scale: (f64, f64),
}

impl Default for ParamRanges {
    fn default() -> Self {
        let d = CartPoleParams::default();
        let half = |v: f64| (0.5 * v, 1.5 * v);
        Self {
            cart_mass: half(d.cart_mass),
            pole_mass: half(d.pole_mass),
            pole_half_length: half(d.pole_half_length),
            gravity: (d.gravity, d.gravity),
            force_scale: half(d.force_scale),
        }
    }
}

impl ParamRanges {
    fn draw(&self, rng: &mut rng::Rng) -> CartPoleParams {
        let mut pick = |(lo, hi): (f64, f64)| if lo == hi { lo } else { rng.random_range(lo..=hi) };
        CartPoleParams {
            cart_mass: pick(self.cart_mass),
            pole_mass: pick(self.pole_mass),
            pole_half_length: pick(self.pole_half_length),
            gravity: pick(self.gravity),
            force_scale: pick(self.force_scale),
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [self.cart_mass, self.pole_mass, self.pole_half_length, self.gravity, self.force_scale];
        if all.iter().all(|(lo, hi)| *lo > 0.0 && lo <= hi) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("parameter ranges must satisfy 0 < min <= max: {self:?}")))
        }
    }
}

fn initial_state(seed: u64, index: usize, spread: f64) -> CartPoleState {
    let angle = if spread > 0.0 {
        rng::substream(seed, domain::CARTPOLE_INIT, index as u64).random_range(-spread..=spread)
    } else {
        0.0
    };
    CartPoleState { pole_angle: angle, ..Default::default() }
}

/// Fixed parameters, zero action, pole released near upright.
pub fn sample_fixed_dataset(
    n: usize,
    p: &CartPoleParams,
    init_spread: f64,
    dt: f64,
    len: usize,
    substeps: usize,
    seed: u64,
) -> Result<Dataset> {
    let actions = vec![0.0; len];
    let trajectories = (0..n)
        .map(|i| {
            let mut tr = simulate_cartpole(initial_state(seed, i, init_spread), &actions, p, dt, substeps)?;
            tr.source_id = format!("cartpole-fixed-{seed}-{i}");
            Ok(tr)
        })
        .collect::<Result<Vec<_>>>()?;
    let provenance = Provenance::CartpoleFixed { params: *p, init_spread, len, substeps, seed };
    Dataset::new(4, 1, dt, provenance, trajectories)
}

/// Per-trajectory random parameters and a fresh pink-noise action sequence.
#[allow(clippy::too_many_arguments)]
pub fn sample_randomized_dataset(
    n: usize,
    ranges: &ParamRanges,
    noise: &PinkNoiseConfig,
    init_spread: f64,
    dt: f64,
    len: usize,
    substeps: usize,
    seed: u64,
) -> Result<Dataset> {
    ranges.validate()?;
    let trajectories = (0..n)
        .map(|i| {
            let p = ranges.draw(&mut rng::substream(seed, domain::CARTPOLE_PARAMS, i as u64));
            let cfg = PinkNoiseConfig { seed: rng::mix(noise.seed ^ seed, i as u64), ..*noise };
            let actions = pink_noise(len, &cfg)?;
            let mut tr = simulate_cartpole(initial_state(seed, i, init_spread), &actions, &p, dt, substeps)?;
            tr.source_id = format!(
                "cartpole-rand-{seed}-{i}:cart_mass={:.17e},pole_mass={:.17e},pole_half_length={:.17e},gravity={:.17e},force_scale={:.17e}",
                p.cart_mass, p.pole_mass, p.pole_half_length, p.gravity, p.force_scale
            );
            Ok(tr)
        })
        .collect::<Result<Vec<_>>>()?;
    let provenance = Provenance::CartpoleRandomized {
        ranges: *ranges,
        pink: *noise,
        init_spread,
        len,
        substeps,
        seed,
    };
    Dataset::new(4, 1, dt, provenance, trajectories)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CartPoleKind {
    Fixed,
    Randomized,
}

/// Everything needed to regenerate a simulated cart-pole dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CartPoleDatasetConfig {
    pub kind: CartPoleKind,
    pub count: usize,
    pub params: CartPoleParams,
    pub ranges: ParamRanges,
    pub pink: PinkNoiseConfig,
    /// Initial pole angle is uniform in `±init_spread` rad.
    pub init_spread: f64,
    pub dt: f64,
    /// States per trajectory.
    pub len: usize,
    pub substeps: usize,
    pub seed: u64,
}

impl Default for CartPoleDatasetConfig {
    fn default() -> Self {
        Self {
            kind: CartPoleKind::Fixed,
            count: 20_000,
            params: CartPoleParams::default(),
            ranges: ParamRanges::default(),
            pink: PinkNoiseConfig::default(),
            init_spread: 0.2,
            dt: 0.02,
            len: 64,
            substeps: 4,
            seed: 0,
        }
    }
}

impl CartPoleDatasetConfig {
    pub fn sample(&self) -> Result<Dataset> {
        match self.kind {
            CartPoleKind::Fixed => {
                sample_fixed_dataset(self.count, &self.params, self.init_spread, self.dt, self.len, self.substeps, self.seed)
            }
            CartPoleKind::Randomized => sample_randomized_dataset(
                self.count,
                &self.ranges,
                &self.pink,
                self.init_spread,
                self.dt,
                self.len,
                self.substeps,
                self.seed,
            ),
        }
    }
}
