use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
seed = 3

[data]
n_per_region = [6, 6, 6, 6]
dims = 16
spacing_mm = 10.0

[model]
conv_channels = [4, 8]
fc_widths = [16, 8]

[train]
epochs = 2
batch_size = 4
"#;

fn mpr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpr")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, format!("{extra}\n{TINY}")).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&mpr(&[])), 1);
    assert_eq!(code(&mpr(&["train", "--repr", "rodrigues"])), 1);
    assert_eq!(code(&mpr(&["train", "--variant", "two_heads"])), 1);
    assert_eq!(code(&mpr(&["--help"])), 0);
}

#[test]
fn flags_are_checked_before_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    assert_eq!(code(&mpr(&["gen-data", "--fraction", "1.5", "--out", s(&out)])), 1);
    assert_eq!(code(&mpr(&["gen-data", "--fold", "5", "--out", s(&out)])), 1);
    assert!(!out.exists());
    assert_eq!(code(&mpr(&["gen-data"])), 1);
}

#[test]
fn missing_data_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "manifest = \"absent/manifest.json\"");
    let out = mpr(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn diverging_training_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, TINY.replace("epochs = 2", "epochs = 2\nlr = 1e30\nmomentum = 0.0")).unwrap();
    let out = dir.path().join("out");
    assert_eq!(code(&mpr(&["train", "--config", s(&cfg), "--out", s(&out)])), 3);
    assert!(out.join("nan_snapshot.ckpt").exists());
}

#[test]
fn generate_train_evaluate_convert() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = write_config(dir.path(), "");
    let gen = mpr(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    assert_eq!(code(&gen), 0, "{}", String::from_utf8_lossy(&gen.stderr));
    let manifest = data.join("manifest.json");
    assert_eq!(read_json(&manifest)["entries"].as_array().unwrap().len(), 24);

    let cfg = write_config(dir.path(), &format!("manifest = {:?}", s(&manifest)));
    let run = dir.path().join("run");
    let train = mpr(&["train", "--config", s(&cfg), "--fold", "1", "--workers", "2", "--out", s(&run)]);
    assert_eq!(code(&train), 0, "{}", String::from_utf8_lossy(&train.stderr));
    for f in ["best.ckpt", "final.ckpt", "history.json", "report.json", "report.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(read_json(&run.join("history.json")).as_array().unwrap().len(), 2);

    let eval_dir = dir.path().join("eval");
    let ckpt = run.join("best.ckpt");
    let eval = mpr(&["evaluate", "--config", s(&cfg), "--fold", "1", "--checkpoint", s(&ckpt), "--out", s(&eval_dir)]);
    assert_eq!(code(&eval), 0, "{}", String::from_utf8_lossy(&eval.stderr));
    // the training run evaluates the same checkpoint on the same fold
    assert_eq!(read_json(&eval_dir.join("evaluation.json"))["blocks"], read_json(&run.join("report.json"))["blocks"]);
    let table = String::from_utf8_lossy(&eval.stdout);
    assert!(table.contains("calcaneus") && table.contains("all"), "{table}");

    assert_eq!(code(&mpr(&["evaluate", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--variant", "baseline"])), 1);

    let conv = mpr(&["convert", "--config", s(&cfg), "--repr", "quat", "--out", s(&dir.path().join("targets"))]);
    assert_eq!(code(&conv), 0, "{}", String::from_utf8_lossy(&conv.stderr));
    let targets = read_json(&dir.path().join("targets/targets_quat.json"));
    let entries = targets["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 24);
    assert!(entries.iter().all(|e| e["target"].as_array().unwrap().len() == 21));
}

#[test]
fn training_is_reproducible_under_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let r = mpr(&["train", "--config", s(&cfg), "--seed", seed, "--workers", "1", "--out", s(&out)]);
        assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
        let bytes = |f: &str| std::fs::read(out.join(f)).unwrap();
        (bytes("final.ckpt"), bytes("report.json"))
    };
    let a = run("a", "9");
    assert_eq!(a, run("b", "9"));
    assert_ne!(a.0, run("c", "10").0);
}

#[test]
fn ablation_keeps_translation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("ablate");
    let r = mpr(&["ablate", "--config", s(&cfg), "--repr", "6dxy", "--fold", "0", "--out", s(&out)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let report = read_json(&out.join("ablation.json"));
    let blocks = report["blocks"].as_array().unwrap();
    assert_eq!(blocks.len(), 1);
    let rows = |k: &str| blocks[0][k]["rows"].as_array().unwrap().clone();
    for (a, b) in rows("regressed").iter().zip(rows("post_processed").iter()) {
        assert_eq!(a["d"], b["d"]);
    }
    assert!(out.join("ablation.txt").exists());
}

#[test]
fn full_fraction_sweep_matches_plain_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let sweep = dir.path().join("sweep");
    let r = mpr(&["sweep-data", "--config", s(&cfg), "--fraction", "1.0", "--fold", "0", "--out", s(&sweep)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let train = dir.path().join("train");
    let t = mpr(&["train", "--config", s(&cfg), "--fold", "0", "--out", s(&train)]);
    assert_eq!(code(&t), 0, "{}", String::from_utf8_lossy(&t.stderr));
    let a = read_json(&sweep.join("data_sweep.json"));
    let b = read_json(&train.join("report.json"));
    assert_eq!(a["blocks"][0]["regressed"]["rows"], b["blocks"][0]["regressed"]["rows"]);
    assert_eq!(a["blocks"][0]["post_processed"]["rows"], b["blocks"][0]["post_processed"]["rows"]);
}

#[test]
fn class_corruption_needs_a_with_class_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let multi = dir.path().join("multi");
    assert_eq!(code(&mpr(&["train", "--config", s(&cfg), "--out", s(&multi)])), 0);
    let ckpt = multi.join("best.ckpt");
    assert_eq!(code(&mpr(&["corrupt-class", "--config", s(&cfg), "--checkpoint", s(&ckpt)])), 1);

    let with_class = dir.path().join("with_class");
    assert_eq!(code(&mpr(&["train", "--config", s(&cfg), "--variant", "with_class", "--out", s(&with_class)])), 0);
    let out = dir.path().join("corrupt");
    let ckpt = with_class.join("best.ckpt");
    let r = mpr(&["corrupt-class", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&out)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let report = read_json(&out.join("class_corruption.json"));
    let settings: Vec<&str> = report["blocks"].as_array().unwrap().iter().map(|b| b["setting"].as_str().unwrap()).collect();
    assert_eq!(settings, ["true label", "0.0", "0.5", "1.0"]);
    // the true one-hot row is the plain evaluation of the same checkpoint
    assert_eq!(report["blocks"][0]["regressed"]["rows"], read_json(&with_class.join("report.json"))["blocks"][0]["regressed"]["rows"]);
}

#[test]
fn hparam_search_ranks_trials() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("search");
    let r = mpr(&["hparam-search", "--config", s(&cfg), "--trials", "2", "--out", s(&out)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let trials = read_json(&out.join("hparam_search.json"));
    let scores: Vec<f64> = trials.as_array().unwrap().iter().map(|t| t["val_score"].as_f64().unwrap_or(f64::INFINITY)).collect();
    assert_eq!(scores.len(), 2);
    assert!(scores[0] <= scores[1]);
}
