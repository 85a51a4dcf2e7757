use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cstr_core::data::{generate_dataset, read_dataset, write_dataset, Sample, SceneConfig};
use cstr_core::gcs::GatePreset;
use cstr_core::metrics::{MetricsReport, CLASS_NAMES};
use cstr_core::model::Variant;
use cstr_core::train::{
    build_data, evaluate, load_checkpoint, run_ablation, run_noise_study, save_checkpoint, train,
    write_csv, write_log, RunCache, TrainConfig, ABLATION_HEADER, NOISE_HEADER,
};

#[derive(Parser)]
#[command(
    name = "cstr",
    version,
    about = "Cross-scale terrain segmentation: data, training and experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic terrain scenes into a dataset file.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// First scene index of the stream.
        #[arg(long, default_value_t = 0)]
        start: u64,
        /// Scene size as HxW.
        #[arg(long, default_value = "64x64", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long)]
        overlap: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write its checkpoint, log and metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training scenes from a dataset file instead of the generator.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, requires = "data")]
        eval_data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on held-out scenes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write predicted label maps as a dataset file.
        #[arg(long, requires = "out")]
        predictions: bool,
    },
    /// Train every variant of the cumulative ablation chain per seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
    },
    /// Train on boundary-jittered labels and evaluate on clean ones.
    NoiseStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,3,5")]
        radii: Vec<usize>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gate: Option<GatePreset>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    point_budget: Option<f64>,
    #[arg(long)]
    no_point_refine: bool,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or("expected HxW, e.g. 64x64")?;
    let p = |v: &str| v.parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(h)?, p(w)?))
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(TrainConfig::default()),
    }
}

impl Common {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = load_config(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(v) = self.variant {
            cfg.variant = Some(v);
        }
        if let Some(g) = self.gate {
            cfg.model.gate = g;
        }
        if let Some(b) = self.point_budget {
            cfg.model.point_budget = b;
        }
        if let Some(m) = self.max_iters {
            cfg.max_iters = m;
            cfg.warmup_iters = cfg.warmup_iters.min(m.saturating_sub(1));
        }
        if self.no_point_refine {
            cfg.model = cfg.model_config();
            cfg.variant = None;
            cfg.model.point_refine = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn report_line(m: &MetricsReport) -> String {
    format!(
        "mIoU {:.4}  bIoU {:.4}  F1 {:.4}  aAcc {:.4}",
        m.miou, m.biou, m.boundary_f1, m.aacc
    )
}

fn write_metrics(path: &Path, m: &MetricsReport) -> Result<()> {
    let mut header = vec!["miou", "biou", "f1", "aacc"];
    header.extend(CLASS_NAMES.iter().copied());
    let mut rec: Vec<String> = [m.miou, m.biou, m.boundary_f1, m.aacc]
        .iter()
        .map(|v| format!("{v:.6}"))
        .collect();
    rec.extend(m.per_class_iou.iter().map(|v| format!("{v:.6}")));
    write_csv(fs::File::create(path)?, &header, [rec])?;
    Ok(())
}

fn samples_of(path: &Path) -> Result<Vec<Sample>> {
    Ok(read_dataset(path)
        .with_context(|| format!("reading {}", path.display()))?
        .samples)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData {
            seed,
            count,
            start,
            size: (height, width),
            overlap,
            out,
        } => {
            let mut cfg = SceneConfig {
                height,
                width,
                seed,
                ..Default::default()
            };
            if let Some(o) = overlap {
                if !(0.0..=1.0).contains(&o) {
                    bail!("overlap must lie in [0, 1]");
                }
                cfg.overlap = o;
            }
            if height % 16 != 0 || width % 16 != 0 || height == 0 || width == 0 {
                bail!("scene extents must be positive multiples of 16");
            }
            write_dataset(&out, &cfg, &generate_dataset(&cfg, start, count))?;
            println!("wrote {count} scenes to {}", out.display());
        }
        Command::Train {
            common,
            data,
            eval_data,
        } => {
            let cfg = common.config()?;
            let (tr, ev) = match data {
                Some(p) => {
                    let ev = match eval_data {
                        Some(e) => samples_of(&e)?,
                        None => build_data(&cfg.data).1,
                    };
                    (samples_of(&p)?, ev)
                }
                None => build_data(&cfg.data),
            };
            fs::create_dir_all(&common.out)?;
            let t = Instant::now();
            let outcome = match train(&cfg, &tr, &ev) {
                Ok(o) => o,
                Err(cstr_core::train::TrainError::Diverged {
                    iter,
                    reason,
                    last_good,
                }) => {
                    let path = common.out.join("last_good.ckpt");
                    save_checkpoint(&path, &last_good)?;
                    bail!(
                        "diverged at iteration {iter} ({reason}); saved {}",
                        path.display()
                    );
                }
                Err(e) => return Err(e.into()),
            };
            fs::write(common.out.join("config.toml"), cfg.to_toml())?;
            save_checkpoint(&common.out.join("model.ckpt"), &outcome.model)?;
            write_log(fs::File::create(common.out.join("log.csv"))?, &outcome.log)?;
            write_metrics(&common.out.join("metrics.csv"), &outcome.metrics)?;
            println!(
                "{} in {:.1}s: {}",
                cfg.model_config().variant().map_or("custom", |v| v.name()),
                t.elapsed().as_secs_f64(),
                report_line(&outcome.metrics)
            );
        }
        Command::Eval {
            checkpoint,
            config,
            data,
            out,
            predictions,
        } => {
            let model = load_checkpoint(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let samples = match data {
                Some(p) => samples_of(&p)?,
                None => build_data(&load_config(config.as_deref())?.data).1,
            };
            let m = evaluate(&model, &samples)?;
            println!("{}", report_line(&m));
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                write_metrics(&dir.join("metrics.csv"), &m)?;
                if predictions && !samples.is_empty() {
                    let mut preds = Vec::with_capacity(samples.len());
                    for chunk in samples.chunks(10) {
                        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
                        for (labels, s) in model.predict(&images)?.into_iter().zip(chunk) {
                            preds.push(Sample {
                                image: s.image.clone(),
                                labels,
                            });
                        }
                    }
                    let scene = SceneConfig {
                        height: samples[0].labels.height,
                        width: samples[0].labels.width,
                        ..Default::default()
                    };
                    write_dataset(&dir.join("predictions.cstr"), &scene, &preds)?;
                }
            }
        }
        Command::Ablate {
            common,
            seeds,
            variants,
        } => {
            let cfg = common.config()?;
            let variants = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants
            };
            let rows = run_ablation(&variants, &cfg, &seeds, &mut RunCache::new())?;
            for r in &rows {
                println!(
                    "{:<14} seed {}: {}",
                    r.variant.name(),
                    r.seed,
                    report_line(&r.metrics)
                );
            }
            fs::create_dir_all(&common.out)?;
            let path = common.out.join("ablation.csv");
            write_csv(
                fs::File::create(&path)?,
                &ABLATION_HEADER,
                rows.iter().map(|r| r.record()),
            )?;
            println!("wrote {}", path.display());
        }
        Command::NoiseStudy {
            common,
            seeds,
            radii,
        } => {
            let cfg = common.config()?;
            let rows = run_noise_study(&radii, &cfg, &seeds, &mut RunCache::new())?;
            for r in &rows {
                println!(
                    "{:<16} r={} seed {}: {}",
                    r.model,
                    r.r,
                    r.seed,
                    report_line(&r.metrics)
                );
            }
            fs::create_dir_all(&common.out)?;
            let path = common.out.join("noise.csv");
            write_csv(
                fs::File::create(&path)?,
                &NOISE_HEADER,
                rows.iter().map(|r| r.record()),
            )?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
