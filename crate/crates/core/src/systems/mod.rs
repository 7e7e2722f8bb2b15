//! Evaluation systems: cart-pole simulation and pink-noise excitation.

mod cartpole;
mod pink;

pub use cartpole::{
    cartpole_derivative, mechanical_energy, sample_fixed_dataset, sample_randomized_dataset, simulate_cartpole,
    CartPoleDatasetConfig, CartPoleKind, CartPoleParams, CartPoleState, ParamRanges,
};
pub use pink::{pink_noise, PinkNoiseConfig};
