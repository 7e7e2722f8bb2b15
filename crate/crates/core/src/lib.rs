//! Synthetic-data pretraining of state predictors for dynamical systems.
//!
//! The crate is `no_std` (it needs `alloc`). It contains everything that is
//! pure computation:
//!
//! * [`rkhs`]: sampling vector fields as finite RBF kernel expansions.
//! * [`trajgen`]: Euler rollouts, total-variation selection and binning.
//! * [`systems`]: cart-pole simulation and pink-noise excitation.
//! * [`tensor`]: a small reverse-mode autodiff engine.
//! * [`model`]: the decoder-only transformer predictor.
//! * [`training`]: AdamW, patched MSE loss, augmentations, the train loop.
//! * [`baselines`]: windowed linear regression and feed-forward regressors.
//! * [`eval`]: horizon MSE, nested subsets and report aggregation.
//!
//! File formats, the CLI and experiment orchestration live in the `synthdyn`
//! crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod baselines;
pub mod error;
pub mod eval;
pub mod model;
pub mod rkhs;
pub mod rng;
pub mod systems;
pub mod tensor;
pub mod training;
pub mod trajectory;
pub mod trajgen;

pub use error::{Error, Result};
pub use trajectory::{Dataset, DatasetHeader, Provenance, Trajectory};
