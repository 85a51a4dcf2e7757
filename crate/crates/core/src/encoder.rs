//! Small convolutional pyramid encoder.
//!
//! Each stage halves the resolution with a strided 3×3 convolution followed by
//! normalisation and ReLU, then applies one residual 3×3 block.

use rand::Rng;

use crate::nn::{BatchNorm2d, Conv2d, ConvSpec};
use crate::tensor::{invalid, ParamId, ParamStore, Real, Result, Session, Var};

/// Multi-scale features at strides 2, 4, 8 and 16.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

impl FeaturePyramid {
    /// The stride-4 level, used as the fine structural map.
    pub fn fine(&self) -> Var {
        self.levels[1]
    }

    /// The coarsest level.
    pub fn coarsest(&self) -> Var {
        *self.levels.last().expect("pyramid is never empty")
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: Conv2d,
    down_bn: BatchNorm2d,
    res: Conv2d,
    res_bn: BatchNorm2d,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    stages: Vec<Stage>,
    in_channels: usize,
}

impl Encoder {
    pub const STRIDE: usize = 16;

    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        in_channels: usize,
        widths: &[usize],
    ) -> Self {
        let mut stages = Vec::with_capacity(widths.len());
        let mut cin = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            let name = format!("encoder.stage{i}");
            let down = Conv2d::new(
                store,
                rng,
                &format!("{name}.down"),
                ConvSpec::new(cin, w, 3).stride(2).padding(1).bias(false),
            );
            let down_bn = BatchNorm2d::new(store, &format!("{name}.down_bn"), w);
            let res = Conv2d::new(
                store,
                rng,
                &format!("{name}.res"),
                ConvSpec::new(w, w, 3).padding(1).bias(false),
            );
            let res_bn = BatchNorm2d::new(store, &format!("{name}.res_bn"), w);
            stages.push(Stage {
                down,
                down_bn,
                res,
                res_bn,
            });
            cin = w;
        }
        Self {
            stages,
            in_channels,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for st in &self.stages {
            out.extend(st.down.params());
            out.extend(st.res.params());
            for bn in [&st.down_bn, &st.res_bn] {
                out.extend([bn.gamma, bn.beta, bn.running_mean, bn.running_var]);
            }
        }
        out
    }

    /// Encodes `[B, C_in, H, W]` images; `H` and `W` must be multiples of 16.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, image: Var) -> Result<FeaturePyramid> {
        let shape = s.graph.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(invalid(
                "encode",
                format!("expected [B,{},H,W], got {shape:?}", self.in_channels),
            ));
        }
        let (h, w) = (shape[2], shape[3]);
        if h % Self::STRIDE != 0 || w % Self::STRIDE != 0 || h < 32 || w < 32 {
            return Err(invalid(
                "encode",
                format!(
                    "image extents {h}x{w} must be multiples of 16 and at least 32; pad the input"
                ),
            ));
        }
        let mut x = image;
        let mut levels = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let y = st.down.forward(s, x)?;
            let y = st.down_bn.forward(s, y)?;
            let y = s.graph.relu(y);
            let r = st.res.forward(s, y)?;
            let r = st.res_bn.forward(s, r)?;
            let sum = s.graph.add(y, r)?;
            x = s.graph.relu(sum);
            levels.push(x);
        }
        Ok(FeaturePyramid { levels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Mode, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build() -> (ParamStore<f64>, Encoder) {
        let mut store = ParamStore::new();
        let enc = Encoder::new(
            &mut store,
            &mut ChaCha8Rng::seed_from_u64(1),
            3,
            &[4, 4, 4, 4],
        );
        (store, enc)
    }

    #[test]
    fn level_extents_halve() {
        let (store, enc) = build();
        let mut s = Session::new(&store, Mode::Train);
        let x = s.graph.constant(Tensor::full(&[1, 3, 64, 48], 0.5));
        let p = enc.forward(&mut s, x).unwrap();
        let sizes: Vec<_> = p
            .levels
            .iter()
            .map(|&l| s.graph.shape(l)[2..].to_vec())
            .collect();
        assert_eq!(
            sizes,
            vec![vec![32, 24], vec![16, 12], vec![8, 6], vec![4, 3]]
        );
        assert_eq!(p.fine(), p.levels[1]);
    }

    #[test]
    fn rejects_indivisible_extents() {
        let (store, enc) = build();
        let mut s = Session::new(&store, Mode::Eval);
        let x = s.graph.constant(Tensor::zeros(&[1, 3, 40, 64]));
        let err = enc.forward(&mut s, x).unwrap_err();
        assert!(err.to_string().contains("pad"));
        let x = s.graph.constant(Tensor::zeros(&[1, 3, 16, 16]));
        assert!(enc.forward(&mut s, x).is_err());
    }
}
