use std::path::{Path, PathBuf};
use std::process::Command;

use seco_cli::commands::{PAIRS_FILE, PLOT_FILE, REPORT_FILE, SUMMARY_FILE};
use sha2::{Digest, Sha256};
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_seco");

/// Tiny everything: three train and two test categories of 1.5 s clips, a
/// 32-grid model with narrow sub-networks.
fn small_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "synth": { "clip_seconds": 1.5, "train_categories": 3, "test_categories": 2, "clips_per_category": 3 },
        "model": {
            "grid": 32,
            "unet_channels": [4, 4, 8, 8, 8],
            "audio_dim": 8,
            "vision_channels": [8, 8],
            "consistency_width": 4,
            "residual_blocks": 2,
            "downsample_blocks": [0],
            "embed_dim": 16
        },
        "train": { "batch_size": 2, "total_iters": 4, "log_interval": 1 },
        "eval": { "test_pairs": 3, "filter_len": 32 }
    });
    let path = dir.join("small.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn seco(args: &[&str]) -> std::process::Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = seco(args);
    assert!(
        out.status.success(),
        "seco {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// SHA-256 over the relative paths and contents of every data file below
/// `dir` (the resolved config names the output directory, so it is skipped).
fn tree_hash(dir: &Path) -> String {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if !p.ends_with("resolved_config.json") {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files);
    files.sort();
    let mut h = Sha256::new();
    for (name, bytes) in files {
        h.update(name.as_bytes());
        h.update(&bytes);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

struct Fixture {
    tmp: TempDir,
    config: PathBuf,
    data: PathBuf,
    run: PathBuf,
}

impl Fixture {
    fn model(&self) -> PathBuf {
        self.run.join("model.ckpt")
    }
}

fn trained() -> Fixture {
    let tmp = TempDir::new().unwrap();
    let config = small_config(tmp.path());
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    ok(&["gen-data", "--config", s(&config), "--out", s(&data)]);
    ok(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&run)]);
    Fixture { tmp, config, data, run }
}

#[test]
fn gen_data_is_deterministic_in_the_seed() {
    let tmp = TempDir::new().unwrap();
    let config = small_config(tmp.path());
    let dirs: Vec<PathBuf> = ["a", "b", "c"].iter().map(|d| tmp.path().join(d)).collect();
    ok(&["gen-data", "--config", s(&config), "--seed", "3", "--out", s(&dirs[0])]);
    ok(&["gen-data", "--config", s(&config), "--seed", "3", "--out", s(&dirs[1])]);
    ok(&["gen-data", "--config", s(&config), "--seed", "4", "--out", s(&dirs[2])]);
    assert_eq!(tree_hash(&dirs[0]), tree_hash(&dirs[1]));
    assert_ne!(tree_hash(&dirs[0]), tree_hash(&dirs[2]));
    assert!(dirs[0].join("resolved_config.json").exists());
}

#[test]
fn one_clip_per_category_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let out = seco(&["gen-data", "--clips-per-cat", "1", "--out", s(&tmp.path().join("d"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("templates need at least 2"));
}

#[test]
fn usage_errors_exit_with_one_and_help_with_zero() {
    assert_eq!(seco(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(seco(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(seco(&["--help"]).status.code(), Some(0));
    assert_eq!(seco(&["train"]).status.code(), Some(1), "missing --out and --data");
}

#[test]
fn diverging_training_exits_with_two() {
    let tmp = TempDir::new().unwrap();
    let config = small_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&["gen-data", "--config", s(&config), "--out", s(&data)]);
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&config).unwrap()).unwrap();
    v["train"]["lr"] = serde_json::json!({ "audio": 1e300, "vision": 1e300, "fusion": 1e300, "consistency": 1e300 });
    v["train"]["total_iters"] = serde_json::json!(20);
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, v.to_string()).unwrap();
    let run = tmp.path().join("run");
    let out = seco(&["train", "--config", s(&bad), "--data", s(&data), "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("nonfinite_batch.txt").exists());
}

#[test]
fn scoring_commands_write_consistent_outputs() {
    let f = trained();
    let log = std::fs::read_to_string(f.run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 4, "header plus one row per iteration");

    let common = |out: &Path| -> Vec<String> {
        ["--config", s(&f.config), "--data", s(&f.data), "--model", s(&f.model()), "--out", s(out)]
            .iter()
            .map(|a| a.to_string())
            .collect()
    };
    let run = |cmd: &str, out: &Path, extra: &[&str]| {
        let mut args: Vec<String> = vec![cmd.into()];
        args.extend(common(out));
        args.extend(extra.iter().map(|a| a.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&refs);
    };
    let dir = |n: &str| f.tmp.path().join(n);

    run("eval", &dir("e1"), &[]);
    run("eval", &dir("e2"), &["--jobs", "2"]);
    for file in [PAIRS_FILE, SUMMARY_FILE] {
        assert_eq!(
            std::fs::read(dir("e1").join(file)).unwrap(),
            std::fs::read(dir("e2").join(file)).unwrap(),
            "{file} differs between reruns"
        );
    }

    run("online-match", &dir("om0"), &["--om-iters", "0"]);
    assert_eq!(
        std::fs::read(dir("e1").join(PAIRS_FILE)).unwrap(),
        std::fs::read(dir("om0").join(PAIRS_FILE)).unwrap(),
        "T=0 online matching must equal plain evaluation"
    );

    run("online-match", &dir("om2"), &["--om-iters", "2"]);
    let summary = std::fs::read_to_string(dir("om2").join(SUMMARY_FILE)).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2);

    run("sweep", &dir("sw"), &[]);
    let summary = std::fs::read_to_string(dir("sw").join(SUMMARY_FILE)).unwrap();
    assert_eq!(summary.lines().count(), 1 + 5, "T in 0,1,2,5,10");
    let pairs = std::fs::read_to_string(dir("sw").join(PAIRS_FILE)).unwrap();
    assert_eq!(pairs.lines().count(), 1 + 5 * 3);
    let plot: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir("sw").join(PLOT_FILE)).unwrap()).unwrap();
    assert_eq!(plot[0]["series"].as_array().unwrap().len(), 3);

    ok(&["report", "--out", s(&dir("rep")), "--runs", s(&dir("sw")), s(&f.run)]);
    let report = std::fs::read_to_string(dir("rep").join(REPORT_FILE)).unwrap();
    assert_eq!(report.lines().count(), 1 + 5);
}

#[test]
fn training_twice_gives_identical_checkpoints_and_logs() {
    let f = trained();
    let again = f.tmp.path().join("again");
    ok(&["train", "--config", s(&f.config), "--data", s(&f.data), "--out", s(&again)]);
    for file in ["train_log.csv", "model.ckpt"] {
        assert_eq!(
            std::fs::read(f.run.join(file)).unwrap(),
            std::fs::read(again.join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn conflicting_model_section_is_refused() {
    let f = trained();
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&f.config).unwrap()).unwrap();
    v["model"]["embed_dim"] = serde_json::json!(32);
    let bad = f.tmp.path().join("conflict.json");
    std::fs::write(&bad, v.to_string()).unwrap();
    let out = seco(&[
        "eval",
        "--config",
        s(&bad),
        "--data",
        s(&f.data),
        "--model",
        s(&f.model()),
        "--out",
        s(&f.tmp.path().join("x")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn resolved_config_reproduces_the_run() {
    let f = trained();
    let resolved = f.run.join("resolved_config.json");
    let again = f.tmp.path().join("again");
    ok(&["train", "--config", s(&resolved), "--out", s(&again)]);
    assert_eq!(
        std::fs::read(f.run.join("model.ckpt")).unwrap(),
        std::fs::read(again.join("model.ckpt")).unwrap()
    );
}
