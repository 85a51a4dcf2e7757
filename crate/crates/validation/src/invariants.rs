//! Structural checks on forward passes, shared by the unit-style tests and
//! the acceptance run.

use cstr_core::data::{generate_dataset, SceneConfig};
use cstr_core::gcs::fuse;
use cstr_core::model::{images_to_tensor, CstrModel, ModelConfig, ModelOutput, Variant};
use cstr_core::point::budget_count;
use cstr_core::tensor::{Mode, ParamStore, Session, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ROW_TOL: f64 = 1e-6;
pub const FUSE_TOL: f64 = 1e-12;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

pub fn run<R>(
    model: &CstrModel<f64>,
    mode: Mode,
    seed: u64,
    f: impl FnOnce(&Session<'_, f64>, &ModelOutput) -> R,
) -> R {
    let cfg = SceneConfig {
        seed,
        ..Default::default()
    };
    let samples = generate_dataset(&cfg, 0, 2);
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let mut s = Session::new(&model.params, mode);
    let x = s.graph.constant(images_to_tensor(&images).unwrap());
    let out = model.forward(&mut s, x).unwrap();
    f(&s, &out)
}

fn rows_sum_to_one(t: &Tensor<f64>, what: &str) -> Result<(), String> {
    let n = *t.shape().last().unwrap();
    for (i, row) in t.data().chunks(n).enumerate() {
        let sum: f64 = row.iter().sum();
        ensure!((sum - 1.0).abs() < ROW_TOL, "{what} row {i} sums to {sum}");
        ensure!(
            row.iter().all(|&a| a >= 0.0),
            "{what} row {i} has a negative weight"
        );
    }
    Ok(())
}

/// Attention rows are distributions and gate values lie strictly in (0, 1).
pub fn attention_and_gate() -> Result<(), String> {
    for seed in 0..4 {
        let model: CstrModel<f64> = CstrModel::new(ModelConfig::default(), seed).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            run(&model, mode, seed, |s, out| {
                let g = out.gltr.ok_or("no token refinement output")?;
                ensure!(
                    s.value(g.attention.attn).shape() == [2, 6, 16],
                    "class attention shape"
                );
                rows_sum_to_one(s.value(g.attention.attn), "class attention")?;
                let gcs = out.gcs.ok_or("no cross-scale output")?;
                rows_sum_to_one(s.value(gcs.cross.attn), "cross-scale attention")?;
                let gv = s.value(gcs.gate.ok_or("no gate")?);
                ensure!(
                    gv.data().iter().all(|&v| v > 0.0 && v < 1.0),
                    "gate value outside (0, 1)"
                );
                Ok(())
            })?;
        }
    }
    Ok(())
}

/// A zero gate leaves the tokens untouched.
pub fn zero_gate_identity() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let mut rand_t = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    };
    let t2 = store.add("t2", rand_t(&[2, 16, 8]), false);
    let fcs = store.add("fcs", rand_t(&[2, 16, 8]), false);
    let mut s = Session::new(&store, Mode::Eval);
    let (a, b) = (s.param(t2), s.param(fcs));
    let g = s.graph.constant(Tensor::zeros(&[2, 16, 8]));
    let t3 = fuse(&mut s, a, b, Some(g)).map_err(|e| e.to_string())?;
    ensure!(
        s.value(t3) == store.value(t2),
        "zero gate changed the tokens"
    );
    Ok(())
}

/// With every gate parameter at zero the gate is 1/2 and the fused tokens
/// are `T2 + F_cs / 2`.
pub fn zero_init_gate_is_half() -> Result<(), String> {
    let mut model: CstrModel<f64> = CstrModel::new(ModelConfig::default(), 5).unwrap();
    let ids: Vec<_> = model
        .params
        .iter()
        .filter(|(_, e)| e.name.starts_with("gcs.gate."))
        .map(|(id, _)| id)
        .collect();
    ensure!(
        ids.len() == 5,
        "expected 5 gate tensors, found {}",
        ids.len()
    );
    for id in ids {
        let v = model.params.value_mut(id);
        *v = Tensor::zeros(v.shape());
    }
    run(&model, Mode::Eval, 5, |s, out| {
        let gcs = out.gcs.ok_or("no cross-scale output")?;
        ensure!(
            s.value(gcs.gate.ok_or("no gate")?)
                .data()
                .iter()
                .all(|&v| v == 0.5),
            "zero-initialised gate is not 1/2"
        );
        let t3 = s.value(gcs.t3).data();
        let t2 = s.value(out.t2);
        let fcs = s.value(gcs.cross.f_cs).data();
        // t2 is a grid, t3 and f_cs are tokens
        let (c, n) = (t2.shape()[1], t2.shape()[2] * t2.shape()[3]);
        for b in 0..2 {
            for ch in 0..c {
                for i in 0..n {
                    let tok = (b * n + i) * c + ch;
                    let want = t2.data()[(b * c + ch) * n + i] + 0.5 * fcs[tok];
                    ensure!(
                        (t3[tok] - want).abs() < FUSE_TOL,
                        "token {i} channel {ch}: {} vs {want}",
                        t3[tok]
                    );
                }
            }
        }
        Ok(())
    })
}

/// A trained-looking point head changes at most `k` pixels per image.
pub fn point_sparsity() -> Result<(), String> {
    let mut model: CstrModel<f64> = CstrModel::new(ModelConfig::default(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for id in model.point_params() {
        for v in model.params.value_mut(id).data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    let k = budget_count(model.config.point_budget, 64, 64);
    ensure!(k == 41, "budget {k}");
    run(&model, Mode::Eval, 2, |s, out| {
        let (coarse, refined) = (s.value(out.coarse), s.value(out.logits));
        let hw = 64 * 64;
        for b in 0..2 {
            let changed = (0..hw)
                .filter(|&p| {
                    (0..6).any(|c| {
                        let i = (b * 6 + c) * hw + p;
                        coarse.data()[i] != refined.data()[i]
                    })
                })
                .count();
            ensure!(changed <= k, "{changed} pixels changed, budget {k}");
            ensure!(changed > 0, "random point head changed nothing");
        }
        Ok(())
    })
}

/// A freshly initialised point head leaves the logits bit-identical.
pub fn zero_init_point_head_is_no_op() -> Result<(), String> {
    for seed in 0..3 {
        let model: CstrModel<f64> = CstrModel::new(ModelConfig::default(), seed).unwrap();
        run(&model, Mode::Train, seed, |s, out| {
            let p = out.point.as_ref().ok_or("no point output")?;
            ensure!(p.point_logits.is_some(), "no points selected");
            ensure!(
                s.value(out.coarse) == s.value(out.logits),
                "fresh point head changed logits"
            );
            Ok(())
        })?;
    }
    Ok(())
}

/// The buffer is fused exactly once per forward pass when present.
pub fn single_fuse() -> Result<(), String> {
    for v in Variant::ALL {
        let model: CstrModel<f64> = CstrModel::new(ModelConfig::for_variant(v), 0).unwrap();
        let expected = usize::from(v.flags().1);
        let got = run(&model, Mode::Train, 0, |s, _| s.fuse_calls());
        ensure!(
            got == expected,
            "{v}: {got} fuse calls, expected {expected}"
        );
    }
    Ok(())
}

pub fn all() -> Vec<(&'static str, fn() -> Result<(), String>)> {
    vec![
        ("attention rows and gate range", attention_and_gate),
        ("zero gate identity", zero_gate_identity),
        ("zero-init gate is 1/2", zero_init_gate_is_half),
        ("point sparsity", point_sparsity),
        ("zero-init point head", zero_init_point_head_is_no_op),
        ("single fuse call", single_fuse),
    ]
}
