use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cstr_core::data::read_dataset;
use cstr_core::train::{DataConfig, TrainConfig};

fn cstr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cstr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cstr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let cfg = TrainConfig {
        max_iters: 6,
        warmup_iters: 2,
        batch_size: 2,
        log_interval: 2,
        data: DataConfig {
            train_count: 4,
            eval_count: 3,
            ..Default::default()
        },
        ..Default::default()
    };
    let path = dir.join("tiny.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_data_writes_a_readable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scenes.cstr");
    ok(&[
        "gen-data",
        "--seed",
        "3",
        "--count",
        "5",
        "--size",
        "32x48",
        "--out",
        path.to_str().unwrap(),
    ]);
    let ds = read_dataset(&path).unwrap();
    assert_eq!(ds.samples.len(), 5);
    assert_eq!(
        (ds.header.height, ds.header.width, ds.header.seed),
        (32, 48, 3)
    );
}

#[test]
fn gen_data_rejects_bad_extents() {
    let dir = tempfile::tempdir().unwrap();
    let out = cstr(&[
        "gen-data",
        "--size",
        "50x50",
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("multiples of 16"));
}

#[test]
fn train_then_eval_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    ok(&[
        "train",
        "--config",
        &cfg,
        "--seed",
        "1",
        "--out",
        run.to_str().unwrap(),
    ]);
    for f in ["config.toml", "model.ckpt", "log.csv", "metrics.csv"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let log = fs::read_to_string(run.join("log.csv")).unwrap();
    assert!(log.starts_with("iter,lr,loss"));

    let ev = dir.path().join("eval");
    ok(&[
        "eval",
        "--checkpoint",
        run.join("model.ckpt").to_str().unwrap(),
        "--config",
        run.join("config.toml").to_str().unwrap(),
        "--out",
        ev.to_str().unwrap(),
        "--predictions",
    ]);
    assert_eq!(
        fs::read(run.join("metrics.csv")).unwrap(),
        fs::read(ev.join("metrics.csv")).unwrap()
    );
    assert_eq!(
        read_dataset(&ev.join("predictions.cstr"))
            .unwrap()
            .samples
            .len(),
        3
    );
}

#[test]
fn ablate_writes_one_row_per_variant_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("abl");
    ok(&[
        "ablate",
        "--config",
        &cfg,
        "--seeds",
        "0,1",
        "--variants",
        "baseline,gcs-point",
        "--out",
        out.to_str().unwrap(),
    ]);
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,seed,miou,biou,f1,aacc");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("Baseline,0,"));
}

#[test]
fn noise_study_covers_both_models() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("noise");
    ok(&[
        "noise-study",
        "--config",
        &cfg,
        "--seeds",
        "0",
        "--radii",
        "0,3",
        "--out",
        out.to_str().unwrap(),
    ]);
    let csv = fs::read_to_string(out.join("noise.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.contains("no-gate-no-band,0,3,"));
}

#[test]
fn unknown_variant_is_rejected() {
    let out = cstr(&["train", "--variant", "nonsense"]);
    assert!(!out.status.success());
}
