//! Global-local token refinement on the bottleneck lattice.
//!
//! The pyramid is collapsed into one lattice `T0` by a softmax-weighted sum of
//! per-level projections. Learnable class prototypes then attend over the
//! lattice tokens; the resulting class tokens are redistributed back onto the
//! lattice through the transposed attention map (`T1`), and a residual
//! depthwise-pointwise block restores local detail (`T2 = T1 + φ(T1)`).

use rand::Rng;

use crate::encoder::FeaturePyramid;
use crate::nn::{fan_in_uniform, grid_to_tokens, tokens_to_grid, Conv2d, ConvSpec, Projection};
use crate::tensor::{invalid, ParamId, ParamStore, Real, Result, Session, Tensor, Var};

/// Softmax over levels of `pooled_l · w_l`.
///
/// `pooled[l]` is `[B, C_l]` and `w[l]` is `[C_l]`; returns `[B, L]`.
pub fn scale_weights<T: Real>(s: &mut Session<'_, T>, pooled: &[Var], w: &[Var]) -> Result<Var> {
    if pooled.len() != w.len() || pooled.is_empty() {
        return Err(invalid(
            "scale_weights",
            format!("{} levels, {} weight vectors", pooled.len(), w.len()),
        ));
    }
    let mut logits = Vec::with_capacity(pooled.len());
    for (&p, &wl) in pooled.iter().zip(w) {
        let c = s.graph.shape(wl)[0];
        let col = s.graph.reshape(wl, &[c, 1])?;
        logits.push(s.graph.matmul(p, col)?);
    }
    let z = s.graph.concat(&logits, 1)?;
    s.graph.softmax(z, 1)
}

/// `Σ_l weights[:, l] · projected[l]` for `[B, C, H0, W0]` projections.
pub fn aggregate<T: Real>(s: &mut Session<'_, T>, projected: &[Var], weights: Var) -> Result<Var> {
    let wshape = s.graph.shape(weights).to_vec();
    if wshape.len() != 2 || wshape[1] != projected.len() {
        return Err(invalid(
            "aggregate",
            format!("weights {wshape:?} for {} levels", projected.len()),
        ));
    }
    let mut acc: Option<Var> = None;
    for (l, &p) in projected.iter().enumerate() {
        let wl = s.graph.narrow(weights, 1, l, 1)?;
        let wl = s.graph.reshape(wl, &[wshape[0], 1, 1, 1])?;
        let term = s.graph.mul(p, wl)?;
        acc = Some(match acc {
            Some(a) => s.graph.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| invalid("aggregate", "no levels"))
}

/// Bottleneck aggregation: per-level pointwise projection, resize to the
/// stride-16 lattice, softmax-weighted sum.
#[derive(Clone, Debug)]
pub struct Aggregator {
    /// `None` selects fixed uniform level weights.
    pub w_alpha: Option<Vec<ParamId>>,
    pub phi: Vec<Conv2d>,
    pub embed_dim: usize,
}

impl Aggregator {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        widths: &[usize],
        embed_dim: usize,
        learned_weights: bool,
    ) -> Self {
        let phi = widths
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                Conv2d::new(
                    store,
                    rng,
                    &format!("aggregate.phi{l}"),
                    ConvSpec::pointwise(c, embed_dim).bias(false),
                )
            })
            .collect();
        let w_alpha = learned_weights.then(|| {
            widths
                .iter()
                .enumerate()
                .map(|(l, &c)| {
                    store.add(format!("aggregate.w_alpha{l}"), Tensor::zeros(&[c]), true)
                })
                .collect()
        });
        Self {
            w_alpha,
            phi,
            embed_dim,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out: Vec<ParamId> = self.phi.iter().flat_map(|c| c.params()).collect();
        if let Some(w) = &self.w_alpha {
            out.extend(w.iter().copied());
        }
        out
    }

    /// Level weights `[B, L]` for the pyramid.
    pub fn weights<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        pyramid: &FeaturePyramid,
    ) -> Result<Var> {
        let b = s.graph.shape(pyramid.levels[0])[0];
        let l = pyramid.levels.len();
        match &self.w_alpha {
            None => Ok(s
                .graph
                .constant(Tensor::full(&[b, l], T::of(1.0 / l as f64)))),
            Some(ids) => {
                let mut pooled = Vec::with_capacity(l);
                for &lv in &pyramid.levels {
                    let c = s.graph.shape(lv)[1];
                    let m = s.graph.mean_axes(lv, &[2, 3])?;
                    pooled.push(s.graph.reshape(m, &[b, c])?);
                }
                let w: Vec<Var> = ids.iter().map(|&id| s.param(id)).collect();
                scale_weights(s, &pooled, &w)
            }
        }
    }

    /// Returns `(weights, T0)`.
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        pyramid: &FeaturePyramid,
    ) -> Result<(Var, Var)> {
        if pyramid.levels.len() != self.phi.len() {
            return Err(invalid(
                "aggregate",
                format!(
                    "{} levels for {} projections",
                    pyramid.levels.len(),
                    self.phi.len()
                ),
            ));
        }
        let lattice = s.graph.shape(pyramid.coarsest())[2..].to_vec();
        let weights = self.weights(s, pyramid)?;
        let mut projected = Vec::with_capacity(self.phi.len());
        for (phi, &lv) in self.phi.iter().zip(&pyramid.levels) {
            let p = phi.forward(s, lv)?;
            projected.push(s.graph.resize(p, lattice[0], lattice[1])?);
        }
        let t0 = aggregate(s, &projected, weights)?;
        Ok((weights, t0))
    }
}

/// Output of [`class_attention`].
#[derive(Clone, Copy, Debug)]
pub struct ClassAttention {
    /// `[B, N_class, N]`, rows sum to one.
    pub attn: Var,
    /// Log of `attn`, computed stably from the scores.
    pub log_attn: Var,
    /// `[B, N_class, C]`.
    pub class_tokens: Var,
    /// `[B, N, C]`.
    pub t1: Var,
}

/// Each token receives the class tokens weighted by its attention affinities.
pub fn redistribute<T: Real>(s: &mut Session<'_, T>, attn: Var, class_tokens: Var) -> Result<Var> {
    s.graph.matmul_t(attn, class_tokens, true, false)
}

/// Prototype cross-attention over lattice tokens.
///
/// `tokens: [B, N, C]`, `prototypes: [N_class, d]`, `w_k: [C, d]`, `w_v: [C, C]`.
pub fn class_attention<T: Real>(
    s: &mut Session<'_, T>,
    tokens: Var,
    prototypes: Var,
    w_k: Var,
    w_v: Var,
) -> Result<ClassAttention> {
    let d = s.graph.shape(prototypes)[1];
    if s.graph.shape(w_k)[1] != d {
        return Err(invalid(
            "class_attention",
            format!("prototype dim {d} vs key dim {}", s.graph.shape(w_k)[1]),
        ));
    }
    let k = s.graph.matmul(tokens, w_k)?;
    let v = s.graph.matmul(tokens, w_v)?;
    let scores = s.graph.matmul_t(prototypes, k, false, true)?;
    let scores = s.graph.scale(scores, T::of(1.0 / (d as f64).sqrt()));
    let attn = s.graph.softmax(scores, 2)?;
    let log_attn = s.graph.log_softmax(scores, 2)?;
    let class_tokens = s.graph.matmul(attn, v)?;
    let t1 = redistribute(s, attn, class_tokens)?;
    Ok(ClassAttention {
        attn,
        log_attn,
        class_tokens,
        t1,
    })
}

/// `x + pw(relu(dw(x)))` on a `[B, C, H, W]` lattice.
pub fn local_refine<T: Real>(s: &mut Session<'_, T>, x: Var, dw: Var, pw: Var) -> Result<Var> {
    let c = s.graph.shape(x)[1];
    let geom = crate::tensor::kernels::ConvGeometry {
        stride: 1,
        padding: 1,
        groups: c,
    };
    let h = s.graph.conv2d(x, dw, None, geom)?;
    let h = s.graph.relu(h);
    let h = s.graph.conv2d(h, pw, None, Default::default())?;
    s.graph.add(x, h)
}

/// Output of [`Gltr::forward`].
#[derive(Clone, Copy, Debug)]
pub struct GltrOutput {
    pub attention: ClassAttention,
    /// `[B, C, H0, W0]`.
    pub t1: Var,
    pub t2: Var,
}

#[derive(Clone, Debug)]
pub struct Gltr {
    pub prototypes: ParamId,
    pub w_k: Projection,
    pub w_v: Projection,
    pub dw: ParamId,
    pub pw: ParamId,
}

impl Gltr {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        embed_dim: usize,
        key_dim: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            prototypes: store.add(
                "gltr.prototypes",
                fan_in_uniform(rng, &[num_classes, key_dim], 1),
                true,
            ),
            w_k: Projection::new(store, rng, "gltr.w_k", embed_dim, key_dim),
            w_v: Projection::new(store, rng, "gltr.w_v", embed_dim, embed_dim),
            dw: store.add(
                "gltr.refine.dw",
                fan_in_uniform(rng, &[embed_dim, 1, 3, 3], 9),
                true,
            ),
            pw: store.add(
                "gltr.refine.pw",
                fan_in_uniform(rng, &[embed_dim, embed_dim, 1, 1], embed_dim),
                true,
            ),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![
            self.prototypes,
            self.w_k.weight,
            self.w_v.weight,
            self.dw,
            self.pw,
        ]
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, t0: Var) -> Result<GltrOutput> {
        let (h0, w0) = (s.graph.shape(t0)[2], s.graph.shape(t0)[3]);
        let tokens = grid_to_tokens(s, t0)?;
        let q = s.param(self.prototypes);
        let wk = s.param(self.w_k.weight);
        let wv = s.param(self.w_v.weight);
        let attention = class_attention(s, tokens, q, wk, wv)?;
        let t1 = tokens_to_grid(s, attention.t1, h0, w0)?;
        let dw = s.param(self.dw);
        let pw = s.param(self.pw);
        let t2 = local_refine(s, t1, dw, pw)?;
        Ok(GltrOutput { attention, t1, t2 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mode;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn zero_alpha_gives_uniform_weights() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store, Mode::Eval);
        let pooled: Vec<Var> = (0..4)
            .map(|l| s.graph.constant(t(&[1, 2], &[l as f64, 3.0 - l as f64])))
            .collect();
        let w: Vec<Var> = (0..4)
            .map(|_| s.graph.constant(Tensor::zeros(&[2])))
            .collect();
        let out = scale_weights(&mut s, &pooled, &w).unwrap();
        assert_eq!(s.value(out).data(), &[0.25; 4]);
    }

    #[test]
    fn scale_weights_closed_form() {
        // logits [0, 0, 0, ln 3] give [1/6, 1/6, 1/6, 1/2]
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store, Mode::Eval);
        let ln3 = 3f64.ln();
        let pooled: Vec<Var> = [0.0, 0.0, 0.0, ln3]
            .iter()
            .map(|&v| s.graph.constant(t(&[1, 1], &[v])))
            .collect();
        let w: Vec<Var> = (0..4).map(|_| s.graph.constant(t(&[1], &[1.0]))).collect();
        let out = scale_weights(&mut s, &pooled, &w).unwrap();
        let expect = [1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0, 0.5];
        for (a, b) in s.value(out).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn one_hot_weight_selects_level() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store, Mode::Eval);
        let proj: Vec<Var> = (0..3)
            .map(|l| {
                s.graph
                    .constant(Tensor::full(&[2, 2, 1, 1], l as f64 + 0.5))
            })
            .collect();
        let w = s
            .graph
            .constant(t(&[2, 3], &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let out = aggregate(&mut s, &proj, w).unwrap();
        assert_eq!(s.value(out).data(), &[1.5, 1.5, 2.5, 2.5]);
    }

    #[test]
    fn identical_tokens_give_uniform_attention() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store, Mode::Eval);
        let tokens = s.graph.constant(Tensor::full(&[1, 5, 3], 0.7));
        let q = s.graph.constant(t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]));
        let wk = s
            .graph
            .constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let wv = s.graph.constant(Tensor::full(&[3, 3], 0.1));
        let ca = class_attention(&mut s, tokens, q, wk, wv).unwrap();
        for &v in s.value(ca.attn).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn redistribution_by_hand() {
        // class 0 attends wholly to token 1, class 1 to token 0
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store, Mode::Eval);
        let a = s.graph.constant(t(&[1, 2, 2], &[0.0, 1.0, 1.0, 0.0]));
        let ct = s.graph.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let t1 = redistribute(&mut s, a, ct).unwrap();
        assert_eq!(s.value(t1).data(), &[3.0, 4.0, 1.0, 2.0]);
        // both classes on token 0: token 0 receives their sum
        let a = s.graph.constant(t(&[1, 2, 2], &[1.0, 0.0, 1.0, 0.0]));
        let t1 = redistribute(&mut s, a, ct).unwrap();
        assert_eq!(s.value(t1).data(), &[4.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_refine_weights_are_identity() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store, Mode::Eval);
        let data: Vec<f64> = (0..2 * 4 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = s.graph.constant(t(&[1, 2, 4, 4], &data));
        let dw = s.graph.constant(Tensor::full(&[2, 1, 3, 3], 0.3));
        let pw = s.graph.constant(Tensor::zeros(&[2, 2, 1, 1]));
        let y = local_refine(&mut s, x, dw, pw).unwrap();
        assert_eq!(s.value(y), s.value(x));
    }
}
