//! Uncertainty-guided point refinement.
//!
//! The least confident output pixels (smallest gap between the two largest
//! class probabilities) receive a residual logit correction from a small MLP
//! fed with bilinear samples of the fused lattice and the fine feature map.
//! The same selection runs at training and inference time.

use rand::Rng;

use crate::nn::Linear;
use crate::tensor::{invalid, ParamId, ParamStore, PointCoord, Real, Result, Session, Tensor, Var};

/// `p(top1) − p(top2)` of the softmax of one logit vector.
pub fn margin(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter_mut().for_each(|v| *v /= z);
    let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in &e {
        if p > a {
            b = a;
            a = p;
        } else if p > b {
            b = p;
        }
    }
    if b.is_finite() {
        a - b
    } else {
        1.0
    }
}

/// Margin maps `[B][H·W]` of `[B, N_class, H, W]` logits.
pub fn margins<T: Real>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    let sh = logits.shape();
    let (b, c, hw) = (sh[0], sh[1], sh[2] * sh[3]);
    let d = logits.data();
    let mut column = vec![0.0; c];
    (0..b)
        .map(|bi| {
            (0..hw)
                .map(|i| {
                    for (ch, v) in column.iter_mut().enumerate() {
                        *v = d[(bi * c + ch) * hw + i].to_f64_lossy();
                    }
                    margin(&column)
                })
                .collect()
        })
        .collect()
}

/// Number of points for a budget given as a fraction of `h · w`.
pub fn budget_count(fraction: f64, h: usize, w: usize) -> usize {
    ((fraction.max(0.0) * (h * w) as f64).round() as usize).min(h * w)
}

/// Selected pixels of one image, most uncertain first.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    pub indices: Vec<(usize, usize)>,
    pub margins: Vec<f64>,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// The `k` smallest margins of a row-major `[H·W]` map; ties go to the
/// earlier pixel.
pub fn select_points(margins: &[f64], width: usize, k: usize) -> PointSet {
    let mut order: Vec<usize> = (0..margins.len()).collect();
    let key = |&a: &usize, &b: &usize| margins[a].total_cmp(&margins[b]).then(a.cmp(&b));
    let k = k.min(margins.len());
    if k < order.len() && k > 0 {
        order.select_nth_unstable_by(k - 1, key);
    }
    order.truncate(k);
    order.sort_by(key);
    PointSet {
        indices: order.iter().map(|&i| (i / width, i % width)).collect(),
        margins: order.iter().map(|&i| margins[i]).collect(),
    }
}

fn to_lattice(v: usize, from: usize, to: usize) -> f64 {
    if from <= 1 {
        0.0
    } else {
        (v * (to - 1)) as f64 / (from - 1) as f64
    }
}

/// Output of [`PointHead::forward`].
#[derive(Clone, Debug)]
pub struct PointOutput {
    /// Logits with the corrections added at the selected pixels.
    pub refined: Var,
    /// Refined logits at the selected pixels, `[K, N_class]`, `None` when no
    /// pixel was selected.
    pub point_logits: Option<Var>,
    pub points: Vec<PointSet>,
}

impl PointOutput {
    /// `(batch, y, x)` of every selected pixel, in the row order of `point_logits`.
    pub fn flat_points(&self) -> Vec<(usize, usize, usize)> {
        self.points
            .iter()
            .enumerate()
            .flat_map(|(b, p)| p.indices.iter().map(move |&(y, x)| (b, y, x)))
            .collect()
    }
}

/// Residual MLP over concatenated semantic and structural samples.
#[derive(Clone, Debug)]
pub struct PointHead {
    pub layers: Vec<Linear>,
    pub budget: f64,
}

impl PointHead {
    /// Hidden layers are fan-in initialised; the last layer starts at zero.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        inputs: usize,
        hidden: &[usize],
        num_classes: usize,
        budget: f64,
    ) -> Self {
        let mut layers = Vec::new();
        let mut d = inputs;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(Linear::new(store, rng, &format!("point.fc{i}"), d, h));
            d = h;
        }
        layers.push(Linear::zeroed(
            store,
            &format!("point.fc{}", hidden.len()),
            d,
            num_classes,
        ));
        Self { layers, budget }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    /// Per-point class deltas for `features: [K, inputs]`.
    pub fn mlp<T: Real>(&self, s: &mut Session<'_, T>, features: Var) -> Result<Var> {
        let mut x = features;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(s, x)?;
            if i + 1 < self.layers.len() {
                x = s.graph.relu(x);
            }
        }
        Ok(x)
    }

    /// Selects points on `logits: [B, N_class, H, W]` and refines them from
    /// samples of `lattice: [B, C, H0, W0]` and `fine: [B, C_s, H_s, W_s]`.
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        logits: Var,
        lattice: Var,
        fine: Var,
    ) -> Result<PointOutput> {
        let sh = s.graph.shape(logits).to_vec();
        if sh.len() != 4 {
            return Err(invalid("point_refine", format!("logits {sh:?}")));
        }
        let (h, w) = (sh[2], sh[3]);
        let k = budget_count(self.budget, h, w);
        let points: Vec<PointSet> = margins(s.value(logits))
            .iter()
            .map(|m| select_points(m, w, k))
            .collect();
        self.refine(s, points, logits, lattice, fine)
    }

    /// Applies the MLP correction at the given points.
    pub fn refine<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        points: Vec<PointSet>,
        logits: Var,
        lattice: Var,
        fine: Var,
    ) -> Result<PointOutput> {
        let (h, w) = (s.graph.shape(logits)[2], s.graph.shape(logits)[3]);
        let (lh, lw) = (s.graph.shape(lattice)[2], s.graph.shape(lattice)[3]);
        let (fh, fw) = (s.graph.shape(fine)[2], s.graph.shape(fine)[3]);
        let mut out = PointOutput {
            refined: logits,
            point_logits: None,
            points,
        };
        let flat = out.flat_points();
        if flat.is_empty() {
            return Ok(out);
        }
        let coords = |th: usize, tw: usize| -> Vec<PointCoord> {
            flat.iter()
                .map(|&(b, y, x)| PointCoord {
                    batch: b,
                    y: to_lattice(y, h, th),
                    x: to_lattice(x, w, tw),
                })
                .collect()
        };
        let sem = s.graph.sample_points(lattice, &coords(lh, lw))?;
        let st = s.graph.sample_points(fine, &coords(fh, fw))?;
        let feats = s.graph.concat(&[sem, st], 1)?;
        let delta = self.mlp(s, feats)?;
        let refined = s.graph.scatter_add_points(logits, delta, &flat)?;
        let pl = s.graph.sample_points(refined, &coords(h, w))?;
        out.refined = refined;
        out.point_logits = Some(pl);
        Ok(out)
    }
}
