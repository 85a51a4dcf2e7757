//! Central finite differences against reverse-mode gradients.

use std::collections::HashMap;

use cstr_core::tensor::{Mode, ParamId, ParamStore, Result, Session, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const POINTS: usize = 100;

#[derive(Clone, Debug)]
pub struct FdReport {
    pub points: usize,
    pub worst: f64,
    pub worst_at: String,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.points >= POINTS && self.worst < REL_TOL
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Store of trainable tensors drawn from `U(lo, hi)`.
pub fn store_of(
    seed: u64,
    specs: &[(&str, &[usize], f64, f64)],
) -> (ParamStore<f64>, Vec<ParamId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids = specs
        .iter()
        .map(|&(name, shape, lo, hi)| store.add(name, uniform(&mut rng, shape, lo, hi), true))
        .collect();
    (store, ids)
}

fn project<F>(store: &ParamStore<f64>, mode: Mode, f: &F, r: &Tensor<f64>) -> f64
where
    F: Fn(&mut Session<'_, f64>) -> Result<Var>,
{
    let mut s = Session::new(store, mode);
    let out = f(&mut s).expect("forward");
    s.value(out)
        .data()
        .iter()
        .zip(r.data())
        .map(|(a, b)| a * b)
        .sum()
}

/// Compares `d⟨f, R⟩/dθ` for a fixed random `R` at `points` random
/// coordinates of the trainable entries of `store`.
pub fn check<F>(mut store: ParamStore<f64>, mode: Mode, seed: u64, points: usize, f: F) -> FdReport
where
    F: Fn(&mut Session<'_, f64>) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xFD);
    let (r, analytic) = {
        let mut s = Session::new(&store, mode);
        let out = f(&mut s).expect("forward");
        let shape = s.value(out).shape().to_vec();
        let r = uniform(&mut rng, &shape, -1.0, 1.0);
        let rv = s.graph.constant(r.clone());
        let prod = s.graph.mul(out, rv).unwrap();
        let loss = s.graph.sum(prod);
        let grads: HashMap<ParamId, Tensor<f64>> =
            s.param_grads(loss).unwrap().into_iter().collect();
        (r, grads)
    };

    let coords: Vec<(ParamId, usize)> = store
        .iter()
        .filter(|(_, e)| e.trainable)
        .flat_map(|(id, e)| (0..e.value.numel()).map(move |i| (id, i)))
        .collect();
    assert!(coords.len() >= points, "only {} coordinates", coords.len());
    let mut report = FdReport {
        points: 0,
        worst: 0.0,
        worst_at: String::new(),
    };
    for pick in sample(&mut rng, coords.len(), points) {
        let (id, i) = coords[pick];
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = orig + EPS;
        let up = project(&store, mode, &f, &r);
        store.value_mut(id).data_mut()[i] = orig - EPS;
        let down = project(&store, mode, &f, &r);
        store.value_mut(id).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * EPS);
        let a = analytic.get(&id).map_or(0.0, |g| g.data()[i]);
        let e = rel_err(a, numeric);
        if e >= report.worst {
            report.worst = e;
            report.worst_at = format!(
                "{}[{i}]: analytic {a:e}, numeric {numeric:e}",
                store.entry(id).name
            );
        }
        report.points += 1;
    }
    report
}
