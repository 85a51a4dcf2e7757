use thiserror::Error;

use crate::tensor::{ParamStore, Real, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
#[error("non-finite gradient in parameter {param}")]
pub struct ClipError {
    pub param: String,
}

/// Rescales all trainable gradients so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(
    store: &mut ParamStore<T>,
    max_norm: f64,
) -> Result<f64, ClipError> {
    let mut sq = 0.0f64;
    for (_, e) in store.iter().filter(|(_, e)| e.trainable) {
        if !e.grad.is_finite() {
            return Err(ClipError {
                param: e.name.clone(),
            });
        }
        sq += e
            .grad
            .data()
            .iter()
            .map(|g| g.to_f64_lossy().powi(2))
            .sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let k = T::of(max_norm / norm);
        for e in store.iter_mut().filter(|e| e.trainable) {
            e.grad.data_mut().iter_mut().for_each(|g| *g *= k);
        }
    }
    Ok(norm)
}

/// SGD with heavy-ball momentum; weight decay is folded into the gradient.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: store
                .iter()
                .map(|(_, e)| Tensor::zeros(e.value.shape()))
                .collect(),
        }
    }

    /// `v ← μ·v + (g + wd·p)`, `p ← p − lr·v` for every trainable parameter.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        let (mu, wd, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        for (e, v) in store.iter_mut().zip(&mut self.velocity) {
            if !e.trainable {
                continue;
            }
            let g = e.grad.data();
            let p = e.value.data_mut();
            for ((pi, vi), &gi) in p.iter_mut().zip(v.data_mut()).zip(g) {
                *vi = mu * *vi + (gi + wd * *pi);
                *pi -= lr * *vi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store(values: &[f64], grads: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add(
            "w",
            Tensor::from_f64(&[values.len()], values).unwrap(),
            true,
        );
        s.entry_mut(id).grad = Tensor::from_f64(&[grads.len()], grads).unwrap();
        s
    }

    #[test]
    fn clipping_scales_only_above_threshold() {
        let mut s = store(&[0.0, 0.0], &[6.0, 8.0]);
        assert_eq!(clip_global_norm(&mut s, 35.0).unwrap(), 10.0);
        assert_eq!(s.iter().next().unwrap().1.grad.data(), &[6.0, 8.0]);
        let mut s = store(&[0.0, 0.0], &[42.0, 56.0]);
        assert_eq!(clip_global_norm(&mut s, 35.0).unwrap(), 70.0);
        assert_eq!(s.iter().next().unwrap().1.grad.data(), &[21.0, 28.0]);
        let mut s = store(&[1.0], &[0.0]);
        clip_global_norm(&mut s, 35.0).unwrap();
        assert_eq!(s.iter().next().unwrap().1.grad.data(), &[0.0]);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut s = store(&[0.0], &[f64::NAN]);
        assert_eq!(clip_global_norm(&mut s, 35.0).unwrap_err().param, "w");
    }

    #[test]
    fn plain_and_decayed_steps() {
        let mut s = store(&[1.0, -2.0], &[0.5, 1.0]);
        Sgd::new(&s, 0.0, 0.0).step(&mut s, 0.1);
        assert_eq!(s.iter().next().unwrap().1.value.data(), &[0.95, -2.1]);
        let mut s = store(&[2.0], &[0.0]);
        Sgd::new(&s, 0.0, 0.5).step(&mut s, 0.1);
        assert_eq!(
            s.iter().next().unwrap().1.value.data(),
            &[2.0 - 0.1 * 0.5 * 2.0]
        );
    }

    #[test]
    fn momentum_accumulates_over_two_steps() {
        let (lr, g) = (0.1, 2.0);
        let mut s = store(&[0.0], &[g]);
        let mut opt = Sgd::new(&s, 0.9, 0.0);
        opt.step(&mut s, lr);
        opt.step(&mut s, lr);
        let moved = -s.iter().next().unwrap().1.value.data()[0];
        assert!((moved - lr * g * (1.0 + 1.9)).abs() < 1e-12);
    }

    #[test]
    fn frozen_entries_are_left_alone() {
        let mut s = store(&[1.0], &[1.0]);
        s.add("stat", Tensor::from_f64(&[1], &[3.0]).unwrap(), false);
        Sgd::new(&s, 0.9, 0.1).step(&mut s, 1.0);
        assert_eq!(s.value(s.id("stat").unwrap()).data(), &[3.0]);
    }

    proptest! {
        #[test]
        fn clipping_never_grows_a_gradient(g in proptest::collection::vec(-100.0f64..100.0, 1..20), max in 0.1f64..50.0) {
            let mut s = store(&vec![0.0; g.len()], &g);
            clip_global_norm(&mut s, max).unwrap();
            let after = s.iter().next().unwrap().1.grad.data().to_vec();
            let norm: f64 = after.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(norm <= max.max(g.iter().map(|v| v * v).sum::<f64>().sqrt()) * (1.0 + 1e-12));
            for (a, b) in after.iter().zip(&g) {
                prop_assert!(a.abs() <= b.abs());
            }
        }
    }
}
