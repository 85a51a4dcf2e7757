//! Parameterised layers shared by the encoder and the decoder.

use rand::Rng;

use crate::tensor::kernels::ConvGeometry;
use crate::tensor::{BatchStats, Mode, ParamId, ParamStore, Real, Result, Session, Tensor, Var};

/// Uniform fan-in scaled initialisation, variance `1 / fan_in`.
///
/// Values are drawn in f64 and cast so that every precision starts from the
/// same weights.
pub fn fan_in_uniform<T: Real, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (3.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_f64(shape, &data).expect("length matches shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub geom: ConvGeometry,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            geom: ConvGeometry::default(),
            bias: true,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, 1)
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.geom.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.geom.padding = padding;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.geom.groups = groups;
        self
    }

    pub fn bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        spec: ConvSpec,
    ) -> Self {
        let cin_g = spec.in_channels / spec.geom.groups;
        let shape = [spec.out_channels, cin_g, spec.kernel, spec.kernel];
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform(rng, &shape, cin_g * spec.kernel * spec.kernel),
            true,
        );
        let bias = spec.bias.then(|| {
            store.add(
                format!("{name}.bias"),
                Tensor::zeros(&[spec.out_channels]),
                true,
            )
        });
        Self { weight, bias, spec }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.conv2d(x, w, b, self.spec.geom)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Per-channel batch normalisation with running averages for evaluation.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl BatchNorm2d {
    pub const MOMENTUM: f64 = 0.1;

    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(
                format!("{name}.gamma"),
                Tensor::full(&[channels], T::one()),
                true,
            ),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                false,
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::full(&[channels], T::one()),
                false,
            ),
            eps: 1e-5,
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        let eps = T::of(self.eps);
        match s.mode() {
            Mode::Train => {
                let shape = s.graph.shape(x).to_vec();
                let count = shape[0] * shape[2] * shape[3];
                let (y, mean, var) = s.graph.batch_norm(x, gamma, beta, None, eps)?;
                let correction = if count > 1 {
                    T::of(count as f64 / (count - 1) as f64)
                } else {
                    T::one()
                };
                s.record_stats(BatchStats {
                    mean_id: self.running_mean,
                    var_id: self.running_var,
                    mean,
                    var: var.into_iter().map(|v| v * correction).collect(),
                });
                Ok(y)
            }
            Mode::Eval => {
                let params = s.params();
                let mean = params.value(self.running_mean).data();
                let var = params.value(self.running_var).data();
                Ok(s.graph
                    .batch_norm(x, gamma, beta, Some((mean, var)), eps)?
                    .0)
            }
        }
    }
}

/// Folds observed batch statistics into the running averages.
pub fn apply_batch_stats<T: Real>(store: &mut ParamStore<T>, stats: &[BatchStats<T>]) {
    let m = T::of(BatchNorm2d::MOMENTUM);
    for st in stats {
        for (id, batch) in [(st.mean_id, &st.mean), (st.var_id, &st.var)] {
            for (r, &b) in store.value_mut(id).data_mut().iter_mut().zip(batch) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
    }
}

/// Row-wise affine map `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        inputs: usize,
        outputs: usize,
    ) -> Self {
        Self {
            weight: store.add(
                format!("{name}.weight"),
                fan_in_uniform(rng, &[inputs, outputs], inputs),
                true,
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]), true),
        }
    }

    pub fn zeroed<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
    ) -> Self {
        Self {
            weight: store.add(
                format!("{name}.weight"),
                Tensor::zeros(&[inputs, outputs]),
                true,
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]), true),
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let y = s.graph.matmul(x, w)?;
        s.graph.add(y, b)
    }
}

/// `[B, C, H, W]` grid to row-major `[B, H·W, C]` tokens.
pub fn grid_to_tokens<T: Real>(s: &mut Session<'_, T>, x: Var) -> Result<Var> {
    let shape = s.graph.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(crate::tensor::TensorError::Invalid {
            op: "grid_to_tokens",
            msg: format!("expected [B,C,H,W], got {shape:?}"),
        });
    }
    let flat = s
        .graph
        .reshape(x, &[shape[0], shape[1], shape[2] * shape[3]])?;
    s.graph.permute(flat, &[0, 2, 1])
}

/// Inverse of [`grid_to_tokens`].
pub fn tokens_to_grid<T: Real>(s: &mut Session<'_, T>, t: Var, h: usize, w: usize) -> Result<Var> {
    let shape = s.graph.shape(t).to_vec();
    if shape.len() != 3 || shape[1] != h * w {
        return Err(crate::tensor::TensorError::Invalid {
            op: "tokens_to_grid",
            msg: format!("tokens {shape:?} do not fill a {h}x{w} lattice"),
        });
    }
    let cm = s.graph.permute(t, &[0, 2, 1])?;
    s.graph.reshape(cm, &[shape[0], shape[2], h, w])
}

/// Bias-free token projection `x·W` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Projection {
    pub weight: ParamId,
}

impl Projection {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        inputs: usize,
        outputs: usize,
    ) -> Self {
        Self {
            weight: store.add(
                format!("{name}.weight"),
                fan_in_uniform(rng, &[inputs, outputs], inputs),
                true,
            ),
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        s.graph.matmul(x, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_identical_across_precisions() {
        let a: Tensor<f32> = fan_in_uniform(&mut ChaCha8Rng::seed_from_u64(3), &[4, 5], 5);
        let b: Tensor<f64> = fan_in_uniform(&mut ChaCha8Rng::seed_from_u64(3), &[4, 5], 5);
        assert_eq!(a, b.cast::<f32>());
        let bound = (3.0f64 / 5.0).sqrt();
        assert!(b.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn running_stats_move_toward_batch() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 1);
        let x = Tensor::from_f64(&[2, 1, 1, 2], &[1.0, 3.0, 5.0, 7.0]).unwrap();
        let stats = {
            let mut s = Session::new(&store, Mode::Train);
            let xv = s.graph.constant(x);
            let y = bn.forward(&mut s, xv).unwrap();
            let out = s.value(y).data().to_vec();
            let mean: f64 = out.iter().sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            s.take_stats()
        };
        assert_eq!(stats[0].mean, vec![4.0]);
        // unbiased variance of {1,3,5,7}
        assert!((stats[0].var[0] - 20.0 / 3.0).abs() < 1e-12);
        apply_batch_stats(&mut store, &stats);
        assert!((store.value(bn.running_mean).data()[0] - 0.4).abs() < 1e-12);
        assert!((store.value(bn.running_var).data()[0] - (0.9 + 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn token_layout_roundtrip() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store, Mode::Eval);
        let data: Vec<f64> = (0..2 * 3 * 2 * 2).map(|i| i as f64).collect();
        let x = s
            .graph
            .constant(Tensor::from_f64(&[2, 3, 2, 2], &data).unwrap());
        let t = grid_to_tokens(&mut s, x).unwrap();
        assert_eq!(s.graph.shape(t), &[2, 4, 3]);
        // token 1 of item 0 is position (0, 1): channels 1, 5, 9
        assert_eq!(s.value(t).data()[3..6], [1.0, 5.0, 9.0]);
        let back = tokens_to_grid(&mut s, t, 2, 2).unwrap();
        assert_eq!(s.value(back), s.value(x));
    }
}
