use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use margin_metric::dataset::read_embeddings;
use margin_metric::hashing::read_codes;
use margin_metric::Domain;
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_margin-metric"));
    cmd.env_remove("MARGIN_METRIC_SEED");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok_json(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
    data: PathBuf,
    model: PathBuf,
}

fn fixture(extra_train: &[&str]) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.emb");
    let model = dir.path().join("model.json");
    ok_json(&["gen-data", "--classes", "4", "--per-class", "20", "--dim", "8", "--out", s(&data)]);
    let mut args = vec!["train", "--data", s(&data), "--out", s(&model), "--steps", "400", "--lr", "1e-2"];
    args.extend_from_slice(extra_train);
    ok_json(&args);
    Fixture { dir, data, model }
}

#[test]
fn gen_data_writes_requested_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.emb");
    let v = ok_json(&["gen-data", "--classes", "10", "--per-class", "200", "--dim", "16", "--out", s(&out)]);
    assert_eq!(v["samples"], 4000);
    assert_eq!(v["photos"], 2000);
    let batch = read_embeddings(&out).unwrap();
    assert_eq!(batch.len(), 4000);
    assert_eq!(batch.dim(), 16);
    assert_eq!(batch.domain(Domain::Sketch).len(), 2000);
    for c in 0..10 {
        assert_eq!(batch.labels().iter().filter(|&&l| l == c).count(), 400);
    }
}

#[test]
fn gen_data_is_reproducible_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<_> = ["a", "b", "c", "d"].iter().map(|n| dir.path().join(n)).collect();
    let args = ["gen-data", "--classes", "3", "--per-class", "7", "--out"];
    ok_json(&[&args[..], &[s(&paths[0])]].concat());
    ok_json(&[&args[..], &[s(&paths[1])]].concat());
    ok_json(&[&["--seed", "5"], &args[..], &[s(&paths[2])]].concat());
    let out = bin()
        .env("MARGIN_METRIC_SEED", "5")
        .args([&args[..], &[s(&paths[3])]].concat())
        .output()
        .unwrap();
    assert!(out.status.success());
    let bytes: Vec<_> = paths.iter().map(|p| std::fs::read(p).unwrap()).collect();
    assert_eq!(bytes[0], bytes[1]);
    assert_ne!(bytes[0], bytes[2]);
    assert_eq!(bytes[2], bytes[3]);
}

#[test]
fn train_writes_model_and_log() {
    let f = fixture(&[]);
    assert!(f.model.exists());
    let log = std::fs::read_to_string(f.model.with_extension("csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("step,lr,loss"));
    assert_eq!(lines.count(), 400);
}

#[test]
fn train_accepts_lmcl_and_rejects_small_ems_margin() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.emb");
    let model = dir.path().join("m.json");
    ok_json(&["gen-data", "--classes", "3", "--per-class", "5", "--out", s(&data)]);
    let v = ok_json(&[
        "train", "--data", s(&data), "--out", s(&model), "--loss", "lmcl", "--m", "0.35", "--s", "30", "--steps", "5",
    ]);
    assert_eq!(v["loss"]["kind"], "lmcl");
    assert_eq!(code(&["train", "--data", s(&data), "--out", s(&model), "--loss", "ems", "--m", "0.5"]), 1);
    assert_eq!(code(&["train", "--data", s(&data), "--out", s(&model), "--loss", "nope"]), 2);
    assert_eq!(code(&["train", "--data", s(&data)]), 2);
}

#[test]
fn eval_reports_map_and_precision() {
    let f = fixture(&[]);
    let hist = f.dir.path().join("hist.csv");
    let v = ok_json(&[
        "eval", "--model", s(&f.model), "--data", s(&f.data), "--p-at", "1,5", "--distances", "--histogram", s(&hist),
    ]);
    assert_eq!(v["mode"], "standard");
    assert!(v["map"].as_f64().unwrap() > 0.9);
    let p = v["precision"].as_array().unwrap();
    assert_eq!(p.len(), 2);
    assert_eq!(p[1]["k"], 5);
    assert!(v["distances"]["p1"].is_boolean());
    assert_eq!(std::fs::read_to_string(hist).unwrap().lines().count(), 51);
}

#[test]
fn eval_zero_shot_uses_held_out_classes() {
    let f = fixture(&["--holdout", "3"]);
    let held = ok_json(&["eval", "--model", s(&f.model), "--data", s(&f.data), "--mode", "zero-shot", "--holdout", "3"]);
    assert_eq!(held["mode"], "zero-shot");
    assert_eq!(held["queries"], 20);
    assert_eq!(held["gallery"], 20);
    let full = ok_json(&[
        "eval", "--model", s(&f.model), "--data", s(&f.data), "--mode", "zero-shot", "--holdout", "3", "--full-gallery",
    ]);
    assert_eq!(full["gallery"], 80);
    assert_eq!(code(&["eval", "--model", s(&f.model), "--data", s(&f.data), "--mode", "zero-shot"]), 1);
}

#[test]
fn hash_supports_listed_widths_only() {
    let f = fixture(&[]);
    for bits in [32usize, 64, 128] {
        let out = f.dir.path().join(format!("c{bits}.hsh"));
        let b = bits.to_string();
        let v = ok_json(&[
            "hash", "--model", s(&f.model), "--data", s(&f.data), "--bits", &b, "--steps", "50", "--out", s(&out),
        ]);
        assert_eq!(v["bits"], bits);
        let codes = read_codes(&out).unwrap();
        assert_eq!(codes.bits(), bits);
        assert_eq!(codes.len(), 160);
    }
    assert_eq!(code(&["hash", "--model", s(&f.model), "--data", s(&f.data), "--bits", "0"]), 1);
    assert_eq!(code(&["hash", "--model", s(&f.model), "--data", s(&f.data), "--loss-terms", "r+x"]), 2);
}

#[test]
fn verify_geometry_examples() {
    let safe = ok_json(&["verify-geometry", "--m", "3.7320508", "--samples", "20000"]);
    assert_eq!(safe["violations"], 0);
    let small = ok_json(&["verify-geometry", "--m", "1.5", "--samples", "20000"]);
    assert!(small["violations"].as_u64().unwrap() > 0);
    assert_eq!(code(&["verify-geometry", "--m", "1"]), 1);
}

#[test]
fn losscheck_passes_for_every_loss() {
    let v = ok_json(&["losscheck", "--encoder"]);
    let rows = v.as_array().unwrap();
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().all(|r| r["pass"] == true));
    let one = ok_json(&["losscheck", "--loss", "a-softmax"]);
    assert_eq!(one.as_array().unwrap().len(), 1);
    assert_eq!(code(&["losscheck", "--h", "0"]), 1);
}

#[test]
fn config_file_supplies_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    let out = dir.path().join("d.emb");
    std::fs::write(&cfg, r#"{"data": {"classes": 2, "per_class": 3, "dim": 4}}"#).unwrap();
    let v = ok_json(&["--config", s(&cfg), "gen-data", "--out", s(&out)]);
    assert_eq!(v["samples"], 12);
    assert_eq!(v["dim"], 4);
    std::fs::write(&cfg, r#"{"data": {"classez": 2}}"#).unwrap();
    assert_eq!(code(&["--config", s(&cfg), "gen-data", "--out", s(&out)]), 1);
}
