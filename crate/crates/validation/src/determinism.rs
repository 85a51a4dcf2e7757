//! Bitwise reproducibility of logs, result tables, dataset files and
//! checkpoints.

use std::fs;
use std::path::Path;

use cstr_core::data::{read_dataset, write_dataset};
use cstr_core::metrics::MetricsReport;
use cstr_core::model::Variant;
use cstr_core::train::{
    build_data, evaluate, load_checkpoint, run_ablation, save_checkpoint, train, write_csv,
    write_log, DataConfig, RunCache, TrainConfig, ABLATION_HEADER,
};

/// A few dozen iterations on a handful of noisy scenes.
pub fn small_config() -> TrainConfig {
    TrainConfig {
        max_iters: 30,
        warmup_iters: 5,
        batch_size: 2,
        log_interval: 10,
        eval_interval: 15,
        seed: 3,
        data: DataConfig {
            train_count: 8,
            eval_count: 4,
            noise_radius: 1,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn bits(m: &MetricsReport) -> Vec<u64> {
    let mut v: Vec<u64> = m.per_class_iou.iter().map(|x| x.to_bits()).collect();
    v.extend([m.miou, m.aacc, m.biou, m.boundary_f1].map(f64::to_bits));
    v
}

fn log_bytes(cfg: &TrainConfig) -> Result<(Vec<u8>, MetricsReport), String> {
    let (tr, ev) = build_data(&cfg.data);
    let out = train(cfg, &tr, &ev).map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    write_log(&mut buf, &out.log).map_err(|e| e.to_string())?;
    Ok((buf, out.metrics))
}

fn ablation_bytes(cfg: &TrainConfig) -> Result<Vec<u8>, String> {
    let rows = run_ablation(
        &[Variant::Baseline, Variant::GcsPoint],
        cfg,
        &[0, 1],
        &mut RunCache::new(),
    )
    .map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    write_csv(&mut buf, &ABLATION_HEADER, rows.iter().map(|r| r.record()))
        .map_err(|e| e.to_string())?;
    Ok(buf)
}

pub fn csv_outputs_repeat(cfg: &TrainConfig) -> Result<(), String> {
    let (a, ma) = log_bytes(cfg)?;
    let (b, mb) = log_bytes(cfg)?;
    if a != b || bits(&ma) != bits(&mb) {
        return Err("training log differs between identical runs".into());
    }
    let other = TrainConfig {
        seed: cfg.seed + 1,
        ..cfg.clone()
    };
    if log_bytes(&other)?.0 == a {
        return Err("a different seed produced the same log".into());
    }
    let short = TrainConfig {
        max_iters: 10,
        warmup_iters: 2,
        ..cfg.clone()
    };
    if ablation_bytes(&short)? != ablation_bytes(&short)? {
        return Err("ablation table differs between identical runs".into());
    }
    Ok(())
}

pub fn dataset_roundtrip(dir: &Path, cfg: &TrainConfig) -> Result<(), String> {
    let (tr, _) = build_data(&cfg.data);
    let (a, b) = (dir.join("a.cstr"), dir.join("b.cstr"));
    write_dataset(&a, &cfg.data.scene, &tr).map_err(|e| e.to_string())?;
    let back = read_dataset(&a).map_err(|e| e.to_string())?;
    if back.samples != tr {
        return Err("dataset samples changed on read".into());
    }
    write_dataset(&b, &back.header.config, &back.samples).map_err(|e| e.to_string())?;
    if fs::read(&a).map_err(|e| e.to_string())? != fs::read(&b).map_err(|e| e.to_string())? {
        return Err("rewritten dataset file differs".into());
    }
    Ok(())
}

pub fn checkpoint_reproduces_metrics(dir: &Path, cfg: &TrainConfig) -> Result<(), String> {
    let (tr, ev) = build_data(&cfg.data);
    let out = train(cfg, &tr, &ev).map_err(|e| e.to_string())?;
    let (a, b) = (dir.join("a.ckpt"), dir.join("b.ckpt"));
    save_checkpoint(&a, &out.model).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(&a).map_err(|e| e.to_string())?;
    let m = evaluate(&loaded, &ev).map_err(|e| e.to_string())?;
    if bits(&m) != bits(&out.metrics) {
        return Err(format!(
            "reloaded model scores {:?}, trained {:?}",
            m, out.metrics
        ));
    }
    save_checkpoint(&b, &loaded).map_err(|e| e.to_string())?;
    if fs::read(&a).map_err(|e| e.to_string())? != fs::read(&b).map_err(|e| e.to_string())? {
        return Err("re-saved checkpoint differs".into());
    }
    Ok(())
}
