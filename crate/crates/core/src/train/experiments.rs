use std::collections::HashMap;
use std::io::Write;

use super::{build_data, train, TrainConfig, TrainError};
use crate::metrics::MetricsReport;
use crate::model::Variant;

pub const ABLATION_HEADER: [&str; 6] = ["variant", "seed", "miou", "biou", "f1", "aacc"];
pub const NOISE_HEADER: [&str; 7] = ["model", "seed", "r", "miou", "biou", "f1", "aacc"];

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct NoiseRow {
    pub model: String,
    pub seed: u64,
    pub r: usize,
    pub metrics: MetricsReport,
}

fn metric_fields(m: &MetricsReport) -> [String; 4] {
    [m.miou, m.biou, m.boundary_f1, m.aacc].map(|v| format!("{v:.6}"))
}

impl AblationRow {
    pub fn record(&self) -> Vec<String> {
        let mut r = vec![self.variant.name().to_string(), self.seed.to_string()];
        r.extend(metric_fields(&self.metrics));
        r
    }
}

impl NoiseRow {
    pub fn record(&self) -> Vec<String> {
        let mut r = vec![
            self.model.clone(),
            self.seed.to_string(),
            self.r.to_string(),
        ];
        r.extend(metric_fields(&self.metrics));
        r
    }
}

/// Writes `header` and `records` as CSV.
pub fn write_csv<W: Write>(
    out: W,
    header: &[&str],
    records: impl IntoIterator<Item = Vec<String>>,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in records {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

/// Final metrics of finished runs keyed by their full configuration, so a
/// run shared between experiments trains once.
#[derive(Debug, Default)]
pub struct RunCache {
    runs: HashMap<String, MetricsReport>,
}

impl RunCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    /// Trains `cfg` on its own data unless an identical run is cached.
    pub fn run(&mut self, cfg: &TrainConfig) -> Result<MetricsReport, TrainError> {
        let key = cfg.to_toml();
        if let Some(m) = self.runs.get(&key) {
            return Ok(m.clone());
        }
        let (tr, ev) = build_data(&cfg.data);
        let m = train(cfg, &tr, &ev)?.metrics;
        self.runs.insert(key, m.clone());
        Ok(m)
    }
}

/// Trains each variant once per seed on the data described by `cfg`.
pub fn run_ablation(
    variants: &[Variant],
    cfg: &TrainConfig,
    seeds: &[u64],
    cache: &mut RunCache,
) -> Result<Vec<AblationRow>, TrainError> {
    let mut rows = Vec::with_capacity(variants.len() * seeds.len());
    for &variant in variants {
        for &seed in seeds {
            let run = TrainConfig {
                variant: Some(variant),
                seed,
                ..cfg.clone()
            };
            rows.push(AblationRow {
                variant,
                seed,
                metrics: cache.run(&run)?,
            });
        }
    }
    Ok(rows)
}

/// The reference model of the noise study: same flags as `cfg` but with the
/// gate and the band regulariser switched off.
pub fn noise_comparison_config(cfg: &TrainConfig) -> TrainConfig {
    let mut c = cfg.clone();
    c.model = cfg.model_config();
    c.model.gated = false;
    c.variant = None;
    c.loss.lambda_band = 0.0;
    c
}

/// Trains on labels jittered with each radius and evaluates on clean labels,
/// for the model in `cfg` ("full") and its [`noise_comparison_config`]
/// ("no-gate-no-band").
pub fn run_noise_study(
    radii: &[usize],
    cfg: &TrainConfig,
    seeds: &[u64],
    cache: &mut RunCache,
) -> Result<Vec<NoiseRow>, TrainError> {
    let models = [
        ("full".to_string(), cfg.clone()),
        ("no-gate-no-band".to_string(), noise_comparison_config(cfg)),
    ];
    let mut rows = Vec::new();
    for (name, base) in &models {
        for &r in radii {
            for &seed in seeds {
                let mut run = base.clone();
                run.seed = seed;
                run.data.noise_radius = r;
                rows.push(NoiseRow {
                    model: name.clone(),
                    seed,
                    r,
                    metrics: cache.run(&run)?,
                });
            }
        }
    }
    Ok(rows)
}
