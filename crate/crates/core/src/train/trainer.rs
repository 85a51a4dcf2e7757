use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{clip_global_norm, poly_lr, ConfigError, DataConfig, Sgd, TrainConfig};
use crate::data::{generate_dataset, perturb_labels, Sample};
use crate::metrics::{MetricsAccumulator, MetricsConfig, MetricsError, MetricsReport};
use crate::model::{images_to_tensor, CstrModel};
use crate::nn::apply_batch_stats;
use crate::tensor::{Mode, Session, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("training diverged at iteration {iter}: {reason}")]
    Diverged {
        iter: usize,
        reason: String,
        /// Parameters before the failing step.
        last_good: Box<CstrModel<f32>>,
    },
}

/// One row of the metric log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub dense: f64,
    pub point: Option<f64>,
    pub band: Option<f64>,
    pub grad_norm: f64,
    pub eval: Option<MetricsReport>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: CstrModel<f32>,
    pub log: Vec<LogEntry>,
    /// Evaluation after the last iteration.
    pub metrics: MetricsReport,
}

/// Training scenes (labels jittered when `noise_radius > 0`) and clean
/// evaluation scenes.
pub fn build_data(cfg: &DataConfig) -> (Vec<Sample>, Vec<Sample>) {
    let mut train = generate_dataset(&cfg.scene, 0, cfg.train_count);
    if cfg.noise_radius > 0 {
        for (i, s) in train.iter_mut().enumerate() {
            let seed = cfg.scene.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i as u64;
            s.labels = perturb_labels(&s.labels, cfg.noise_radius, cfg.flip_prob, seed);
        }
    }
    let eval = generate_dataset(&cfg.scene, cfg.eval_offset, cfg.eval_count);
    (train, eval)
}

/// Pooled metrics of `model` on `samples`, normalisation in evaluation mode.
pub fn evaluate(model: &CstrModel<f32>, samples: &[Sample]) -> Result<MetricsReport, TrainError> {
    let mut acc = MetricsAccumulator::new(MetricsConfig {
        classes: model.config.num_classes,
        ..Default::default()
    });
    for chunk in samples.chunks(10) {
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        for (pred, s) in model.predict(&images)?.iter().zip(chunk) {
            acc.add(&pred.data, &s.labels.data, s.labels.height, s.labels.width)?;
        }
    }
    Ok(acc.report()?)
}

fn diverged(iter: usize, reason: impl Into<String>, model: &CstrModel<f32>) -> TrainError {
    TrainError::Diverged {
        iter,
        reason: reason.into(),
        last_good: Box::new(model.clone()),
    }
}

/// Trains from the initialisation given by `cfg.seed`.
///
/// Batches are drawn from a seeded permutation of `train`, reshuffled every
/// time it is exhausted. Evaluation on `eval` runs every `eval_interval`
/// iterations and after the last one.
pub fn train(
    cfg: &TrainConfig,
    train: &[Sample],
    eval: &[Sample],
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(ConfigError::Invalid("the training set is empty".into()).into());
    }
    let mut model = CstrModel::<f32>::new(cfg.model_config(), cfg.seed)?;
    let mut opt = Sgd::new(&model.params, cfg.momentum, cfg.weight_decay);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::new();

    for iter in 0..cfg.max_iters {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut order_rng);
                order.reverse();
            }
            batch.push(&train[order.pop().expect("refilled above")]);
        }
        let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
        let labels: Vec<u8> = batch
            .iter()
            .flat_map(|s| s.labels.data.iter().copied())
            .collect();
        let lr = poly_lr(iter, cfg);

        let mut s = Session::new(&model.params, Mode::Train);
        let x = s.graph.constant(images_to_tensor(&images)?);
        let out = model.forward(&mut s, x)?;
        let parts = model.loss(&mut s, &out, &labels, &cfg.loss)?;
        let loss = s.value(parts.total).item() as f64;
        if !loss.is_finite() {
            return Err(diverged(iter, format!("loss is {loss}"), &model));
        }
        let dense = s.value(parts.dense).item() as f64;
        let point = parts.point.map(|v| s.value(v).item() as f64);
        let band = parts.band.map(|v| s.value(v).item() as f64);
        let grads = s.param_grads(parts.total)?;
        let stats = s.take_stats();
        drop(s);

        let snapshot = model.params.clone();
        model.params.zero_grads();
        model.params.accumulate(&grads);
        let grad_norm = match clip_global_norm(&mut model.params, cfg.clip_norm) {
            Ok(n) => n,
            Err(e) => {
                model.params = snapshot;
                return Err(diverged(iter, e.to_string(), &model));
            }
        };
        opt.step(&mut model.params, lr);
        apply_batch_stats(&mut model.params, &stats);
        let bad = model
            .params
            .iter()
            .find(|(_, e)| !e.value.is_finite())
            .map(|(_, e)| e.name.clone());
        if let Some(name) = bad {
            let reason = format!("update made {name} non-finite");
            model.params = snapshot;
            return Err(diverged(iter, reason, &model));
        }

        let done = iter + 1;
        let periodic_eval =
            cfg.eval_interval > 0 && done % cfg.eval_interval == 0 && done < cfg.max_iters;
        if periodic_eval
            || done == cfg.max_iters
            || (cfg.log_interval > 0 && done % cfg.log_interval == 0)
        {
            log.push(LogEntry {
                iter: done,
                lr,
                loss,
                dense,
                point,
                band,
                grad_norm,
                eval: if periodic_eval {
                    Some(evaluate(&model, eval)?)
                } else {
                    None
                },
            });
        }
    }
    let metrics = evaluate(&model, eval)?;
    if let Some(last) = log.last_mut().filter(|e| e.iter == cfg.max_iters) {
        last.eval = Some(metrics.clone());
    }
    Ok(TrainOutcome {
        model,
        log,
        metrics,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes the metric log as CSV; evaluation columns are empty between evaluations.
pub fn write_log<W: Write>(out: W, log: &[LogEntry]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "iter",
        "lr",
        "loss",
        "dense",
        "point",
        "band",
        "grad_norm",
        "miou",
        "biou",
        "f1",
        "aacc",
    ])?;
    for e in log {
        let m = e.eval.as_ref();
        w.write_record([
            e.iter.to_string(),
            e.lr.to_string(),
            e.loss.to_string(),
            e.dense.to_string(),
            opt(e.point),
            opt(e.band),
            e.grad_norm.to_string(),
            opt(m.map(|m| m.miou)),
            opt(m.map(|m| m.biou)),
            opt(m.map(|m| m.boundary_f1)),
            opt(m.map(|m| m.aacc)),
        ])?;
    }
    w.flush()?;
    Ok(())
}
