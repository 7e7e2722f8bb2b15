//! The experiment configuration file: one JSON document with the sections
//! `sampler`, `trajgen`, `systems`, `model`, `train` and `eval`. Missing
//! sections and fields take their defaults; unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};
use synthdyn_core::eval::ModelTag;
use synthdyn_core::model::ModelConfig;
use synthdyn_core::rkhs::SamplerConfig;
use synthdyn_core::systems::CartPoleDatasetConfig;
use synthdyn_core::training::{Phase, TrainConfig};
use synthdyn_core::trajgen::TrajGenConfig;

use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Label of the task dataset in reports.
    pub dataset: String,
    pub models: Vec<ModelTag>,
    /// Training-data levels in percent (the zero-shot row is added for `Pre`).
    pub levels: Vec<f64>,
    pub repeats: usize,
    pub seed: u64,
    /// Held-out share of the task dataset, fixed for every model and level.
    pub test_fraction: f64,
    pub split_seed: u64,
    pub ridge: f64,
    /// Fine-tuning recipe; defaults to `train.finetune_recipe()`.
    pub finetune: Option<TrainConfig>,
    /// Recipe for the from-scratch transformer; defaults to `train` with
    /// fine-tuning style augmentation.
    pub scratch: Option<TrainConfig>,
    /// Architecture of the from-scratch transformer; defaults to the 8-layer
    /// small configuration for the task dimensions.
    pub scratch_model: Option<ModelConfig>,
    /// FNN recipe; defaults to `train`.
    pub fnn: Option<TrainConfig>,
    /// Inference batch size.
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            dataset: "task".into(),
            models: ModelTag::ALL.to_vec(),
            levels: vec![2.0, 10.0, 100.0],
            repeats: 5,
            seed: 0,
            test_fraction: 0.1,
            split_seed: 0,
            ridge: synthdyn_core::baselines::DEFAULT_RIDGE,
            finetune: None,
            scratch: None,
            scratch_model: None,
            fnn: None,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub version: u32,
    pub sampler: SamplerConfig,
    pub trajgen: TrajGenConfig,
    pub systems: CartPoleDatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            sampler: SamplerConfig::default(),
            trajgen: TrajGenConfig::default(),
            systems: CartPoleDatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(Error::json("experiment config"))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Format(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json { source, .. } => Error::Json { context: format!("config {}", path.display()), source },
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn finetune_config(&self) -> TrainConfig {
        self.eval.finetune.clone().unwrap_or_else(|| self.train.finetune_recipe())
    }

    pub fn scratch_config(&self) -> TrainConfig {
        self.eval.scratch.clone().unwrap_or_else(|| TrainConfig { phase: Phase::Finetune, ..self.train.clone() })
    }

    pub fn fnn_config(&self) -> TrainConfig {
        self.eval.fnn.clone().unwrap_or_else(|| self.train.clone())
    }
}
