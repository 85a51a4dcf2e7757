//! Training objectives.

use serde::{Deserialize, Serialize};

use crate::band::boundary_band;
use crate::tensor::{invalid, Real, Result, Session, Var};

/// Label value excluded from every loss and metric.
pub const IGNORE_INDEX: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_band: f64,
    pub lambda_point: f64,
    /// Band half-width on the bottleneck lattice.
    pub band_width: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_band: 0.4,
            lambda_point: 1.0,
            band_width: 2,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CrossEntropy {
    pub loss: Var,
    /// Every label was ignored; the loss is then zero.
    pub all_ignored: bool,
}

fn targets(labels: &[u8], ignore: u8) -> Vec<Option<usize>> {
    labels
        .iter()
        .map(|&l| (l != ignore).then_some(l as usize))
        .collect()
}

/// Mean negative log-probability of the labelled class.
///
/// `logits` is `[B, N_class, H, W]` with `labels` in `B·H·W` row-major order,
/// or `[K, N_class]` with one label per row.
pub fn cross_entropy<T: Real>(
    s: &mut Session<'_, T>,
    logits: Var,
    labels: &[u8],
    ignore: u8,
) -> Result<CrossEntropy> {
    let t = targets(labels, ignore);
    let all_ignored = t.iter().all(Option::is_none);
    let weights = vec![T::one(); t.len()];
    let lp = s.graph.log_softmax(logits, 1)?;
    let loss = s.graph.nll(lp, 1, &t, &weights)?;
    Ok(CrossEntropy { loss, all_ignored })
}

/// Nearest-neighbour downsampling that reads each lattice cell at its centre.
pub fn lattice_labels(labels: &[u8], h: usize, w: usize, h0: usize, w0: usize) -> Vec<u8> {
    assert_eq!(labels.len(), h * w, "label map size");
    let mut out = Vec::with_capacity(h0 * w0);
    for i in 0..h0 {
        let y = ((2 * i + 1) * h / (2 * h0)).min(h - 1);
        for j in 0..w0 {
            let x = ((2 * j + 1) * w / (2 * w0)).min(w - 1);
            out.push(labels[y * w + x]);
        }
    }
    out
}

/// `λ ·` mean over band tokens of the cross-entropy between the class
/// assignment (attention columns renormalised over classes) and the labels.
///
/// `log_attn: [B, N_class, N]` holds log attention; `labels` and `band` are
/// `B·N` long. Tokens outside the band carry no weight.
pub fn band_regularizer<T: Real>(
    s: &mut Session<'_, T>,
    log_attn: Var,
    labels: &[u8],
    band: &[bool],
    lambda: f64,
    ignore: u8,
) -> Result<Var> {
    if labels.len() != band.len() {
        return Err(invalid(
            "band_regularizer",
            format!("{} labels vs {} band entries", labels.len(), band.len()),
        ));
    }
    let assign = s.graph.log_softmax(log_attn, 1)?;
    let t = targets(labels, ignore);
    let weights: Vec<T> = band
        .iter()
        .map(|&b| if b { T::one() } else { T::zero() })
        .collect();
    let ce = s.graph.nll(assign, 1, &t, &weights)?;
    Ok(s.graph.scale(ce, T::of(lambda)))
}

/// Inputs of [`total_loss`] from one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs<'a> {
    /// `[B, N_class, H, W]` logits after point refinement.
    pub refined: Var,
    /// Refined logits `[K, N_class]` at `points`.
    pub point_logits: Option<Var>,
    pub points: &'a [(usize, usize, usize)],
    /// Log class attention `[B, N_class, H0·W0]` with its lattice extents.
    pub log_attn: Option<(Var, usize, usize)>,
    /// `B·H·W` labels.
    pub labels: &'a [u8],
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub dense: Var,
    pub point: Option<Var>,
    pub band: Option<Var>,
    pub all_ignored: bool,
}

/// Dense cross-entropy + `λ_pt ·` point cross-entropy + band regulariser.
pub fn total_loss<T: Real>(
    s: &mut Session<'_, T>,
    inp: LossInputs<'_>,
    cfg: &LossConfig,
) -> Result<LossParts> {
    let sh = s.graph.shape(inp.refined).to_vec();
    let (b, h, w) = (sh[0], sh[2], sh[3]);
    if inp.labels.len() != b * h * w {
        return Err(invalid(
            "total_loss",
            format!("{} labels for logits {sh:?}", inp.labels.len()),
        ));
    }
    let dense = cross_entropy(s, inp.refined, inp.labels, IGNORE_INDEX)?;
    let mut total = dense.loss;
    let mut point = None;
    if let (Some(pl), true) = (inp.point_logits, cfg.lambda_point != 0.0) {
        let pt_labels: Vec<u8> = inp
            .points
            .iter()
            .map(|&(bi, y, x)| inp.labels[(bi * h + y) * w + x])
            .collect();
        let ce = cross_entropy(s, pl, &pt_labels, IGNORE_INDEX)?;
        let scaled = s.graph.scale(ce.loss, T::of(cfg.lambda_point));
        total = s.graph.add(total, scaled)?;
        point = Some(ce.loss);
    }
    let mut band = None;
    if let (Some((la, h0, w0)), true) = (inp.log_attn, cfg.lambda_band != 0.0) {
        let mut lat = Vec::with_capacity(b * h0 * w0);
        let mut mask = Vec::with_capacity(b * h0 * w0);
        for bi in 0..b {
            let l = lattice_labels(&inp.labels[bi * h * w..][..h * w], h, w, h0, w0);
            mask.extend(boundary_band(&l, h0, w0, cfg.band_width));
            lat.extend(l);
        }
        let reg = band_regularizer(s, la, &lat, &mask, cfg.lambda_band, IGNORE_INDEX)?;
        total = s.graph.add(total, reg)?;
        band = Some(reg);
    }
    Ok(LossParts {
        total,
        dense: dense.loss,
        point,
        band,
        all_ignored: dense.all_ignored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Mode, ParamStore, Tensor};

    #[test]
    fn uniform_logits_give_ln_classes() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store, Mode::Eval);
        let x = s.graph.constant(Tensor::zeros(&[1, 6, 2, 2]));
        let ce = cross_entropy(&mut s, x, &[0, 3, 5, 1], IGNORE_INDEX).unwrap();
        assert!((s.value(ce.loss).item() - 6f64.ln()).abs() < 1e-15);
        assert!(!ce.all_ignored);
    }

    #[test]
    fn confident_correct_logits_have_tiny_loss() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store, Mode::Eval);
        // ln(1 + e^-20) for two classes; six classes give 5·e^-20 ≈ 1.03e-8
        let x = s
            .graph
            .constant(Tensor::from_f64(&[1, 2], &[0.0, 20.0]).unwrap());
        let ce = cross_entropy(&mut s, x, &[1], IGNORE_INDEX).unwrap();
        assert!(s.value(ce.loss).item() < 1e-8);
    }

    #[test]
    fn all_ignored_is_zero_and_flagged() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store, Mode::Eval);
        let x = s.graph.constant(Tensor::full(&[1, 6, 1, 2], 0.3));
        let ce = cross_entropy(&mut s, x, &[IGNORE_INDEX, IGNORE_INDEX], IGNORE_INDEX).unwrap();
        assert_eq!(s.value(ce.loss).item(), 0.0);
        assert!(ce.all_ignored);
    }

    #[test]
    fn regularizer_uniform_assignment_is_lambda_ln2() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store, Mode::Eval);
        let la = s.graph.constant(Tensor::full(&[1, 2, 4], -(4f64.ln())));
        let r = band_regularizer(&mut s, la, &[0, 1, 1, 0], &[true; 4], 0.4, IGNORE_INDEX).unwrap();
        assert!((s.value(r).item() - 0.4 * 2f64.ln()).abs() < 1e-15);
        let r =
            band_regularizer(&mut s, la, &[0, 1, 1, 0], &[false; 4], 0.4, IGNORE_INDEX).unwrap();
        assert_eq!(s.value(r).item(), 0.0);
    }

    #[test]
    fn lattice_labels_read_cell_centres() {
        let l: Vec<u8> = (0..64).map(|i| i as u8).collect();
        assert_eq!(lattice_labels(&l, 8, 8, 2, 2), vec![18, 22, 50, 54]);
        assert_eq!(lattice_labels(&l, 8, 8, 8, 8), l);
    }
}
