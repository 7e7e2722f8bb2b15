//! Repeated train-and-evaluate runs over models and data levels, reduced into
//! an [`EvalReport`].

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use synthdyn_core::baselines::{fit_fnn, fit_linear, iterative_rollout, small_transformer_config, WindowedRegressor};
use synthdyn_core::eval::{self, mse_horizon, EvalEntry, EvalReport, ModelTag};
use synthdyn_core::model::{PredictRequest, TransformerModel};
use synthdyn_core::rng;
use synthdyn_core::tensor::Real;
use synthdyn_core::training::{finetune, train};
use synthdyn_core::{Dataset, Trajectory};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "model,dataset,level,seed,mse";

/// Mean horizon MSE of a transformer over the test trajectories, batched.
pub fn evaluate_transformer<T: Real>(
    model: &TransformerModel<T>,
    test: &[Trajectory],
    batch_size: usize,
) -> Result<f64> {
    let (c, m) = (model.config().context_len, model.config().pred_len);
    if test.is_empty() {
        return Err(synthdyn_core::Error::Empty("no test trajectories".into()).into());
    }
    let mut sum = 0.0;
    for chunk in test.chunks(batch_size.max(1)) {
        let reqs = chunk.iter().map(|tr| PredictRequest::from_trajectory(tr, 0, c, m)).collect::<Result<Vec<_>, _>>()?;
        let preds = model.predict_batch(&reqs)?;
        for (tr, p) in chunk.iter().zip(&preds) {
            sum += mse_horizon(p, &tr.states_flat()[c * tr.d_x()..(c + m) * tr.d_x()], tr.d_x())?;
        }
    }
    Ok(sum / test.len() as f64)
}

pub fn evaluate_regressor(reg: &WindowedRegressor, test: &[Trajectory], c: usize, m: usize) -> Result<f64> {
    Ok(eval::evaluate_predictor(test, c, m, |r| iterative_rollout(reg, r))?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Job {
    model: ModelTag,
    level: f64,
    repeat: usize,
}

/// The sub-runs of an experiment in report order: per repeat, the zero-shot
/// row first, then every level and model.
fn jobs(cfg: &ExperimentConfig) -> Vec<Job> {
    let mut out = Vec::new();
    for repeat in 0..cfg.eval.repeats {
        if cfg.eval.models.contains(&ModelTag::Pre) {
            out.push(Job { model: ModelTag::Pre, level: 0.0, repeat });
        }
        for &level in &cfg.eval.levels {
            for &model in cfg.eval.models.iter().filter(|&&m| m != ModelTag::Pre) {
                out.push(Job { model, level, repeat });
            }
        }
    }
    out
}

pub fn repeat_seed(cfg: &ExperimentConfig, repeat: usize) -> u64 {
    rng::mix(cfg.eval.seed, repeat as u64)
}

struct Context<'a, T> {
    cfg: &'a ExperimentConfig,
    pool: &'a Dataset,
    test: &'a [Trajectory],
    pretrained: Option<&'a TransformerModel<T>>,
    c: usize,
    m: usize,
}

fn run_job<T: Real>(ctx: &Context<'_, T>, job: Job) -> Result<f64> {
    let cfg = ctx.cfg;
    let seed = repeat_seed(cfg, job.repeat);
    let need_pretrained = || {
        ctx.pretrained.ok_or_else(|| Error::Usage(format!("model {} needs a pretrained checkpoint", job.model)))
    };
    if job.model == ModelTag::Pre {
        return evaluate_transformer(need_pretrained()?, ctx.test, cfg.eval.batch_size);
    }
    let data = eval::subset(ctx.pool, job.level / 100.0, seed)?;
    match job.model {
        ModelTag::Pre => unreachable!(),
        ModelTag::Ft => {
            let mut model = need_pretrained()?.clone();
            let tc = synthdyn_core::training::TrainConfig { seed, ..cfg.finetune_config() };
            finetune(&mut model, &data, &tc, &mut ())?;
            evaluate_transformer(&model, ctx.test, cfg.eval.batch_size)
        }
        ModelTag::St => {
            let base = cfg.eval.scratch_model.clone().unwrap_or_else(|| small_transformer_config(ctx.pool.d_x(), ctx.pool.d_u()));
            let mc = synthdyn_core::model::ModelConfig { context_len: ctx.c, pred_len: ctx.m, seed, ..base };
            let mut model = TransformerModel::<T>::new(mc)?;
            let tc = synthdyn_core::training::TrainConfig { seed, ..cfg.scratch_config() };
            train(&mut model, &data, &tc, &mut ())?;
            evaluate_transformer(&model, ctx.test, cfg.eval.batch_size)
        }
        ModelTag::Lr => evaluate_regressor(&fit_linear(&data, cfg.eval.ridge)?, ctx.test, ctx.c, ctx.m),
        ModelTag::Fnn => {
            let tc = synthdyn_core::training::TrainConfig { seed, ..cfg.fnn_config() };
            evaluate_regressor(&fit_fnn(&data, &tc)?.0, ctx.test, ctx.c, ctx.m)
        }
    }
}

/// Splits `task` once into a training pool and a fixed test set, then runs
/// every `(model, level, repeat)` with the repeat's seed driving both the data
/// subset and the initialisation. Failed sub-runs are listed in the report,
/// which is then marked partial. `threads` worker slots run sub-runs
/// concurrently; the report does not depend on their number.
pub fn run_experiment<T: Real>(
    cfg: &ExperimentConfig,
    task: &Dataset,
    pretrained: Option<&TransformerModel<T>>,
    threads: usize,
) -> Result<EvalReport> {
    if cfg.eval.repeats == 0 {
        return Err(Error::Usage("eval.repeats must be at least 1".into()));
    }
    if let Some(bad) = cfg.eval.levels.iter().find(|&&l| !(l > 0.0 && l <= 100.0)) {
        return Err(Error::Usage(format!("data level {bad}% is outside (0, 100]")));
    }
    let needs = cfg.eval.models.iter().any(|m| matches!(m, ModelTag::Pre | ModelTag::Ft));
    if needs && pretrained.is_none() {
        return Err(Error::Usage("models Pre and Ft need a pretrained checkpoint".into()));
    }
    let (c, m) = match pretrained {
        Some(p) => (p.config().context_len, p.config().pred_len),
        None => (cfg.model.context_len, cfg.model.pred_len),
    };
    let (pool, test) = eval::train_test_split(task, cfg.eval.test_fraction, cfg.eval.split_seed)?;
    let ctx = Context { cfg, pool: &pool, test: test.trajectories(), pretrained, c, m };
    let jobs = jobs(cfg);
    let results: Mutex<Vec<Option<Result<f64>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&job) = jobs.get(i) else { break };
                log::info!("running {} at {}% (repeat {})", job.model, job.level, job.repeat);
                let r = run_job(&ctx, job);
                results.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for (job, r) in jobs.iter().zip(results.into_inner().expect("workers joined")) {
        let seed = repeat_seed(cfg, job.repeat);
        match r.expect("every job ran") {
            Ok(mse) => entries.push(EvalEntry { model: job.model, dataset: cfg.eval.dataset.clone(), level: job.level, seed, mse }),
            Err(e) => failures.push(format!("{} at {}% (seed {seed}): {e}", job.model, job.level)),
        }
    }
    let seeds = (0..cfg.eval.repeats).map(|r| repeat_seed(cfg, r)).collect();
    Ok(EvalReport::new(entries, seeds, failures))
}

/// Plot-ready CSV, one row per entry.
pub fn report_csv(report: &EvalReport) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for e in &report.entries {
        s.push_str(&format!("{},{},{},{},{}\n", e.model, e.dataset, e.level, e.seed, e.mse));
    }
    s
}

pub fn summary_csv(report: &EvalReport) -> String {
    let mut s = String::from("model,dataset,level,runs,median,min,max,range\n");
    for a in &report.aggregates {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            a.model, a.dataset, a.level, a.runs, a.median, a.min, a.max, a.range
        ));
    }
    s
}

/// Writes `report.json`, `report.csv` and `summary.csv` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let files = [
        ("report.json", serde_json::to_string_pretty(report).map_err(Error::json("report"))? + "\n"),
        ("report.csv", report_csv(report)),
        ("summary.csv", summary_csv(report)),
    ];
    let mut out = Vec::new();
    for (name, text) in files {
        let p = dir.join(name);
        fs::write(&p, text).map_err(Error::io(&p))?;
        out.push(p);
    }
    Ok(out)
}
