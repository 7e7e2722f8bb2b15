use alloc::string::String;

use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{context}: dimension mismatch (expected {expected}, found {found})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{op}: incompatible shapes {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("RKHS norm is undefined: Gram quadratic form is {value:e}")]
    IndefiniteGram { value: f64 },

    #[error("cannot rescale a function with zero RKHS norm")]
    ZeroNorm,

    #[error("trajectory diverged at step {step}")]
    BlowUp { step: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("sequence too short: need at least {needed} steps, got {found}")]
    TooShort { needed: usize, found: usize },

    #[error("only {accepted} trajectories accepted, {required} required ({stats})")]
    InsufficientData {
        accepted: usize,
        required: usize,
        stats: String,
    },

    #[error("normal equations are singular; use a positive ridge parameter")]
    Singular,

    #[error("autodiff: {0}")]
    Graph(String),

    #[error("{0}")]
    Empty(String),
}
