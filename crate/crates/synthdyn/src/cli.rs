//! The `synthdyn` command line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use synthdyn_core::baselines::iterative_rollout;
use synthdyn_core::eval::ModelTag;
use synthdyn_core::model::{PredictRequest, TransformerModel};
use synthdyn_core::systems::{pink_noise, simulate_cartpole, CartPoleState};
use synthdyn_core::tensor::Real;
use synthdyn_core::training::{self, history_csv, EpochLoss, EpochObserver, Phase, TrainConfig, TrainReport};
use synthdyn_core::{Dataset, Trajectory};

use crate::checkpoint::{self, Kind};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::experiment::{run_experiment, write_report};
use crate::manifest::{sha256_hex, RunManifest};
use crate::{ndjson, pipeline, recorded};

#[derive(Debug, Parser)]
#[command(name = "synthdyn", version, about = "Pretrain state predictors on synthetic dynamical systems")]
pub struct Cli {
    /// Experiment config (JSON). Missing sections take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file (generate, predict, simulate) or directory (pretrain,
    /// finetune, evaluate).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataKind {
    Rkhs,
    Cartpole,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic RKHS or simulated cart-pole dataset (NDJSON).
    Generate {
        #[arg(long, value_enum, default_value_t = DataKind::Rkhs)]
        kind: DataKind,
    },
    /// Pretrain a transformer from the config's model section.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
    },
    /// Fine-tune a checkpoint on task data.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the model/level/repeat grid and write the report.
    Evaluate {
        /// Task dataset; sampled from the `systems` section when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pretrained checkpoint for the Pre and Ft rows.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Predict the continuation of one trajectory.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// NDJSON dataset or recorded CSV.
        #[arg(long)]
        input: PathBuf,
        /// Which trajectory of the input to use.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Horizon for baseline checkpoints (transformers use their own).
        #[arg(long, default_value_t = 32)]
        horizon: usize,
        /// Sample time assumed for CSV input.
        #[arg(long, default_value_t = 1.0)]
        dt: f64,
    },
    /// Simulate one cart-pole trajectory (CSV).
    Simulate {
        #[arg(long)]
        steps: Option<usize>,
        /// Initial state `cart_pos,cart_vel,pole_angle,pole_ang_vel`.
        #[arg(long, value_delimiter = ',', num_args = 4, allow_hyphen_values = true)]
        x0: Option<Vec<f64>>,
        /// Excite with pink noise instead of zero force.
        #[arg(long)]
        pink: bool,
    },
}

/// Sets every seed field, including those of optional sections.
pub fn override_seeds(cfg: &mut ExperimentConfig, seed: u64) {
    cfg.sampler.seed = seed;
    cfg.trajgen.seed = seed;
    cfg.systems.seed = seed;
    cfg.systems.pink.seed = seed;
    cfg.model.seed = seed;
    cfg.train.seed = seed;
    cfg.eval.seed = seed;
    cfg.eval.split_seed = seed;
    for t in [&mut cfg.eval.finetune, &mut cfg.eval.scratch, &mut cfg.eval.fnn].into_iter().flatten() {
        t.seed = seed;
    }
    if let Some(m) = &mut cfg.eval.scratch_model {
        m.seed = seed;
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        override_seeds(&mut cfg, s);
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    Ok(dir)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    fs::write(path, bytes).map_err(Error::io(path))
}

/// Writes to `--out` when given, else to stdout.
fn emit(cli: &Cli, bytes: &[u8]) -> Result<()> {
    match &cli.out {
        Some(p) => write_file(p, bytes),
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(bytes).and_then(|_| so.flush()).map_err(Error::io(Path::new("<stdout>")))
        }
    }
}

pub fn load_dataset(path: &Path, csv_dt: f64) -> Result<Dataset> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => recorded::load(path, csv_dt),
        _ => ndjson::load(path),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    if cli.threads == 0 {
        return Err(Error::Usage("--threads must be at least 1".into()));
    }
    match &cli.command {
        Command::Generate { kind } => generate(cli, &cfg, *kind),
        Command::Pretrain { data } => match cli.precision {
            Precision::F32 => pretrain::<f32>(cli, &cfg, data),
            Precision::F64 => pretrain::<f64>(cli, &cfg, data),
        },
        Command::Finetune { checkpoint, data } => match cli.precision {
            Precision::F32 => finetune::<f32>(cli, &cfg, checkpoint, data),
            Precision::F64 => finetune::<f64>(cli, &cfg, checkpoint, data),
        },
        Command::Evaluate { data, checkpoint } => match cli.precision {
            Precision::F32 => evaluate::<f32>(cli, cfg, data.as_deref(), checkpoint.as_deref()),
            Precision::F64 => evaluate::<f64>(cli, cfg, data.as_deref(), checkpoint.as_deref()),
        },
        Command::Predict { checkpoint, input, index, horizon, dt } => {
            predict(cli, checkpoint, input, *index, *horizon, *dt)
        }
        Command::Simulate { steps, x0, pink } => simulate(cli, &cfg, *steps, x0.as_deref(), *pink),
    }
}

fn generate(cli: &Cli, cfg: &ExperimentConfig, kind: DataKind) -> Result<()> {
    let data = match kind {
        DataKind::Rkhs => pipeline::generate_rkhs(&cfg.sampler, &cfg.trajgen, cli.threads)?,
        DataKind::Cartpole => cfg.systems.sample()?,
    };
    let path = cli.out.clone().unwrap_or_else(|| PathBuf::from("data.ndjson"));
    let mut bytes = Vec::new();
    ndjson::write(&data, &mut bytes)?;
    write_file(&path, &bytes)?;
    let mut m = RunManifest::new("generate", cli.precision.as_str(), cfg);
    if let Some(c) = &cli.config {
        m.input(c)?;
    }
    m.outputs([&path])?;
    m.extra = json!({ "kind": format!("{kind:?}").to_lowercase(), "count": data.len() });
    let mut mpath = path.clone().into_os_string();
    mpath.push(".manifest.json");
    m.write(Path::new(&mpath))?;
    log::info!("wrote {} trajectories to {}", data.len(), path.display());
    Ok(())
}

/// Writes `best.ckpt` whenever the validation loss improves.
struct BestCheckpoint {
    path: PathBuf,
    metadata: serde_json::Value,
    written: bool,
    error: Option<Error>,
}

impl<T: Real> EpochObserver<T> for BestCheckpoint {
    fn on_epoch(
        &mut self,
        epoch: usize,
        model: &TransformerModel<T>,
        _: &[EpochLoss],
        is_best: bool,
    ) -> synthdyn_core::Result<()> {
        if is_best {
            let mut meta = self.metadata.clone();
            meta["epoch"] = json!(epoch);
            if let Err(e) = checkpoint::save_model(&self.path, model, meta) {
                self.error = Some(e);
                return Err(synthdyn_core::Error::Empty("training stopped: checkpoint not written".into()));
            }
            self.written = true;
        }
        Ok(())
    }
}

fn fit_model_dims(mut model: synthdyn_core::model::ModelConfig, data: &Dataset) -> synthdyn_core::model::ModelConfig {
    if data.d_x() > model.d_x || data.d_u() > model.d_u {
        log::info!(
            "widening the model from (d_x {}, d_u {}) to the dataset's (d_x {}, d_u {})",
            model.d_x,
            model.d_u,
            data.d_x(),
            data.d_u()
        );
        model.d_x = model.d_x.max(data.d_x());
        model.d_u = model.d_u.max(data.d_u());
    }
    model
}

#[allow(clippy::too_many_arguments)]
fn train_and_write<T: Real>(
    cli: &Cli,
    cfg: &ExperimentConfig,
    command: &str,
    mut model: TransformerModel<T>,
    data: &Dataset,
    data_path: &Path,
    tcfg: &TrainConfig,
    inputs: &[&Path],
) -> Result<()> {
    let dir = out_dir(cli)?;
    let data_sha = crate::manifest::sha256_file(data_path)?;
    let metadata = json!({ "phase": command, "data_sha256": data_sha, "train": tcfg });
    let mut best = BestCheckpoint { path: dir.join("best.ckpt"), metadata: metadata.clone(), written: false, error: None };
    let result = match tcfg.phase {
        Phase::Pretrain => training::pretrain(&mut model, data, tcfg, &mut best),
        Phase::Finetune => training::finetune(&mut model, data, tcfg, &mut best),
    };
    let report: TrainReport = match (result, best.error.take()) {
        (_, Some(e)) => return Err(e),
        (r, None) => r?,
    };
    let final_path = dir.join("model.ckpt");
    let mut meta = metadata;
    meta["best_val"] = json!(report.best_val);
    meta["best_epoch"] = json!(report.best_epoch);
    checkpoint::save_model(&final_path, &model, meta)?;
    let hist = dir.join("loss_history.csv");
    fs::write(&hist, history_csv(&report.history)).map_err(Error::io(&hist))?;
    let mut outputs = vec![final_path, hist];
    if best.written {
        outputs.push(best.path.clone());
    }
    let mut m = RunManifest::new(command, cli.precision.as_str(), cfg);
    for p in cli.config.iter().map(PathBuf::as_path).chain(inputs.iter().copied()) {
        m.input(p)?;
    }
    m.outputs(&outputs)?;
    m.extra = json!({ "train": tcfg, "best_val": report.best_val, "best_epoch": report.best_epoch, "steps": report.steps });
    m.write(&dir.join("manifest.json"))
}

fn pretrain<T: Real>(cli: &Cli, cfg: &ExperimentConfig, data_path: &Path) -> Result<()> {
    let data = ndjson::load(data_path)?;
    let model = TransformerModel::<T>::new(fit_model_dims(cfg.model.clone(), &data))?;
    log::info!("pretraining {} parameters on {} trajectories", model.count_params(), data.len());
    let tcfg = TrainConfig { phase: Phase::Pretrain, ..cfg.train.clone() };
    train_and_write(cli, cfg, "pretrain", model, &data, data_path, &tcfg, &[data_path])
}

fn finetune<T: Real>(cli: &Cli, cfg: &ExperimentConfig, ckpt: &Path, data_path: &Path) -> Result<()> {
    let (loaded, _) = checkpoint::load_model(ckpt)?;
    let data = load_dataset(data_path, cfg.systems.dt)?;
    let tcfg = cfg.finetune_config();
    training::check_finetune_recipe(&tcfg, &cfg.train);
    train_and_write(cli, cfg, "finetune", loaded.cast::<T>(), &data, data_path, &tcfg, &[ckpt, data_path])
}

fn evaluate<T: Real>(cli: &Cli, mut cfg: ExperimentConfig, data: Option<&Path>, ckpt: Option<&Path>) -> Result<()> {
    let task = match data {
        Some(p) => load_dataset(p, cfg.systems.dt)?,
        None => cfg.systems.sample()?,
    };
    let pretrained = match ckpt {
        Some(p) => Some(checkpoint::load_model(p)?.0.cast::<T>()),
        None => {
            let before = cfg.eval.models.len();
            cfg.eval.models.retain(|m| !matches!(m, ModelTag::Pre | ModelTag::Ft));
            if cfg.eval.models.len() != before {
                log::warn!("no --checkpoint given: skipping the Pre and Ft rows");
            }
            None
        }
    };
    let report = run_experiment(&cfg, &task, pretrained.as_ref(), cli.threads)?;
    let dir = out_dir(cli)?;
    let outputs = write_report(&report, &dir)?;
    let mut m = RunManifest::new("evaluate", cli.precision.as_str(), &cfg);
    for p in cli.config.iter().map(PathBuf::as_path).chain(data).chain(ckpt) {
        m.input(p)?;
    }
    m.outputs(&outputs)?;
    m.extra = json!({ "seeds": report.seeds, "partial": report.partial, "failures": report.failures });
    m.write(&dir.join("manifest.json"))?;
    if report.partial {
        log::warn!("{} sub-runs failed; the report is partial", report.failures.len());
    }
    Ok(())
}

/// Context of the first `c` steps and the actions that follow, padded with
/// zeros where the input ends before the horizon.
fn request_parts(tr: &Trajectory, c: usize, m: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if tr.len() < c {
        return Err(Error::ContextTooShort { source_id: tr.source_id.clone(), found: tr.len(), needed: c });
    }
    let (d_x, d_u) = (tr.d_x(), tr.d_u());
    let actions = tr.actions_flat();
    let mut future = actions[c * d_u..actions.len().min((c + m) * d_u)].to_vec();
    future.resize(m * d_u, 0.0);
    Ok((tr.states_flat()[..c * d_x].to_vec(), actions[..c * d_u].to_vec(), future))
}

fn predict(cli: &Cli, ckpt: &Path, input: &Path, index: usize, horizon: usize, dt: f64) -> Result<()> {
    let data = load_dataset(input, dt)?;
    let tr = data
        .trajectories()
        .get(index)
        .ok_or_else(|| Error::Usage(format!("input holds {} trajectories, no index {index}", data.len())))?;
    let bytes = fs::read(ckpt).map_err(Error::io(ckpt))?;
    let (manifest, _) = checkpoint::decode(&bytes)?;
    let (c, flat) = if manifest.kind == Kind::Transformer {
        let (loaded, _) = checkpoint::decode_model(&bytes)?;
        let (c, m) = (loaded.config().context_len, loaded.config().pred_len);
        let (cs, ca, fa) = request_parts(tr, c, m)?;
        let req = PredictRequest { d_x: tr.d_x(), d_u: tr.d_u(), context_states: &cs, context_actions: &ca, future_actions: &fa };
        let pred = match cli.precision {
            Precision::F32 => loaded.cast::<f32>().predict(&req)?,
            Precision::F64 => loaded.cast::<f64>().predict(&req)?,
        };
        (c, pred)
    } else {
        let reg = checkpoint::decode_regressor(&bytes)?;
        let c = reg.window();
        let (cs, ca, fa) = request_parts(tr, c, horizon)?;
        let req = PredictRequest { d_x: tr.d_x(), d_u: tr.d_u(), context_states: &cs, context_actions: &ca, future_actions: &fa };
        (c, iterative_rollout(&reg, &req)?)
    };
    let states: Vec<&[f64]> = flat.chunks(tr.d_x()).collect();
    let line = json!({ "source_id": tr.source_id, "start": c, "states": states });
    emit(cli, format!("{line}\n").as_bytes())
}

fn simulate(cli: &Cli, cfg: &ExperimentConfig, steps: Option<usize>, x0: Option<&[f64]>, pink: bool) -> Result<()> {
    let s = &cfg.systems;
    let n = steps.unwrap_or(s.len);
    let x0 = match x0 {
        Some(v) => CartPoleState::from_array([v[0], v[1], v[2], v[3]]),
        None => CartPoleState { cart_pos: 0.0, cart_vel: 0.0, pole_angle: 0.1, pole_ang_vel: 0.0 },
    };
    let actions = if pink { pink_noise(n, &s.pink)? } else { vec![0.0; n] };
    let tr = simulate_cartpole(x0, &actions, &s.params, s.dt, s.substeps)?;
    let mut bytes = Vec::new();
    recorded::write(std::slice::from_ref(&tr), &mut bytes)?;
    log::info!("simulated {n} steps, output sha256 {}", sha256_hex(&bytes));
    emit(cli, &bytes)
}
