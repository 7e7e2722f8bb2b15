//! File formats, experiment orchestration and the command line for
//! [`synthdyn_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod manifest;
pub mod ndjson;
pub mod pipeline;
pub mod recorded;

pub use error::{Error, Result};
pub use synthdyn_core as core;
