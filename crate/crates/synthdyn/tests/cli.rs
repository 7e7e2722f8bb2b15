use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use synthdyn::checkpoint;
use synthdyn::manifest::sha256_file;
use synthdyn_core::model::{ModelConfig, TransformerModel};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_synthdyn"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().rev().find(|l| l.starts_with("{\"error\"")).unwrap_or_else(|| panic!("no error line in {stderr}"));
    serde_json::from_str(line).unwrap()
}

fn write_config(dir: &Path, v: Value) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, v.to_string()).unwrap();
    p
}

fn tiny_model(c: usize, m: usize) -> ModelConfig {
    ModelConfig { d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, context_len: c, pred_len: m, ..ModelConfig::desk(4, 1) }
}

#[test]
fn generate_is_deterministic_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({ "trajgen": { "n_functions": 120 }, "sampler": { "seed": 4 } }));
    let hashes: Vec<String> = [("a.ndjson", "1"), ("b.ndjson", "1"), ("c.ndjson", "3")]
        .iter()
        .map(|(name, threads)| {
            let out = dir.path().join(name);
            let o = run(&["generate", "--config", path(&cfg), "--out", path(&out), "--threads", threads]);
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
            sha256_file(&out).unwrap()
        })
        .collect();
    assert_eq!(hashes[0], hashes[1]);
    assert_eq!(hashes[0], hashes[2]);

    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("a.ndjson.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["outputs"][0]["sha256"], hashes[0].as_str());

    // A different seed gives a different dataset.
    let other = dir.path().join("d.ndjson");
    assert!(run(&["generate", "--config", path(&cfg), "--seed", "5", "--out", path(&other)]).status.success());
    assert_ne!(sha256_file(&other).unwrap(), hashes[0]);
}

#[test]
fn predict_rejects_short_context_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let model = TransformerModel::<f32>::new(tiny_model(32, 32)).unwrap();
    checkpoint::save_model(&ckpt, &model, Value::Null).unwrap();

    let short = dir.path().join("short.csv");
    let sim = run(&["simulate", "--steps", "20", "--out", path(&short)]);
    assert!(sim.status.success(), "{}", String::from_utf8_lossy(&sim.stderr));
    let o = run(&["predict", "--checkpoint", path(&ckpt), "--input", path(&short)]);
    assert_eq!(o.status.code(), Some(1));
    let e = error_line(&o);
    assert_eq!(e["error"]["kind"], "too_short");
    let msg = e["error"]["message"].as_str().unwrap();
    assert!(msg.contains("context length of c = 32"), "{msg}");

    // Longer than c but shorter than c + m: future actions are zero padded.
    let ok_input = dir.path().join("ok.csv");
    assert!(run(&["simulate", "--steps", "40", "--pink", "--out", path(&ok_input)]).status.success());
    let o = run(&["predict", "--checkpoint", path(&ckpt), "--input", path(&ok_input)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pred: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(pred["start"], 32);
    let states = pred["states"].as_array().unwrap();
    assert_eq!(states.len(), 32);
    assert!(states.iter().all(|s| s.as_array().unwrap().len() == 4));
}

#[test]
fn usage_and_missing_file_errors_are_machine_readable() {
    let o = run(&["generate", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["error"]["kind"], "usage");

    let o = run(&["pretrain", "--data", "/nonexistent/data.ndjson"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_line(&o)["error"]["kind"], "io");

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({ "train": { "epochz": 1 } }));
    let o = run(&["generate", "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_line(&o)["error"]["kind"], "schema");
}

#[test]
fn evaluate_writes_exact_header_and_leaves_checkpoint_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("pre.ckpt");
    let model = TransformerModel::<f32>::new(tiny_model(32, 32)).unwrap();
    checkpoint::save_model(&ckpt, &model, Value::Null).unwrap();
    let before = sha256_file(&ckpt).unwrap();

    let cfg = write_config(
        dir.path(),
        json!({
            "systems": { "count": 30 },
            "model": tiny_model(32, 32),
            "eval": { "models": ["Pre", "LR"], "levels": [100.0], "repeats": 1, "test_fraction": 0.2 }
        }),
    );
    let out = dir.path().join("eval");
    let o = run(&["evaluate", "--config", path(&cfg), "--checkpoint", path(&ckpt), "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with("model,dataset,level,seed,mse\n"), "{csv}");
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(sha256_file(&ckpt).unwrap(), before);

    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let inputs = manifest["inputs"].as_array().unwrap();
    assert!(inputs.iter().any(|i| i["sha256"] == before.as_str()));
}

#[test]
fn pretrain_then_finetune_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        json!({
            "trajgen": { "n_functions": 60, "horizon_steps": 15, "context_len": 8, "pred_len": 8 },
            "model": tiny_model(8, 8),
            "train": { "epochs": 2, "batch_size": 16 },
            "systems": { "count": 12, "len": 16 }
        }),
    );
    let data = dir.path().join("syn.ndjson");
    assert!(run(&["generate", "--config", path(&cfg), "--out", path(&data)]).status.success());
    let pre = dir.path().join("pre");
    let o = run(&["pretrain", "--config", path(&cfg), "--data", path(&data), "--out", path(&pre)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["model.ckpt", "best.ckpt", "loss_history.csv", "manifest.json"] {
        assert!(pre.join(f).exists(), "missing {f}");
    }
    let hist = fs::read_to_string(pre.join("loss_history.csv")).unwrap();
    assert!(hist.starts_with("epoch,split,loss\n"));
    assert_eq!(hist.lines().count(), 1 + 2 * 2);

    let task = dir.path().join("task.ndjson");
    assert!(run(&["generate", "--kind", "cartpole", "--config", path(&cfg), "--out", path(&task)]).status.success());
    let ft = dir.path().join("ft");
    let o = run(&[
        "finetune", "--config", path(&cfg), "--checkpoint", path(&pre.join("model.ckpt")), "--data", path(&task), "--out", path(&ft),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (loaded, manifest) = checkpoint::load_model(&ft.join("model.ckpt")).unwrap();
    assert_eq!(loaded.config().d_x, 4);
    assert_eq!(manifest.metadata["phase"], "finetune");
}
