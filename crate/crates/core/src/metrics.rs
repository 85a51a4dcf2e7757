//! Region and boundary metrics.
//!
//! Every metric keeps integer counts so that dataset-level values are
//! obtained by summing per-image counts.

use thiserror::Error;

use crate::band::{boundary_band, dilate};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("label {value} at pixel {index} is outside 0..{classes}")]
    LabelOutOfRange {
        index: usize,
        value: u8,
        classes: usize,
    },
    #[error("prediction has {pred} pixels, ground truth {gt}")]
    SizeMismatch { pred: usize, gt: usize },
    #[error("confusion matrix is empty")]
    Empty,
}

/// `counts[g * n + p]`: pixels with ground truth `g` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &Self) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// `TP / (TP + FP + FN)` per class, `None` for classes absent from both maps.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let n = self.classes;
        (0..n)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..n).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..n).map(|g| self.get(g, c)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }
}

fn check_sizes(pred: &[u8], gt: &[u8]) -> Result<(), MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::SizeMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    Ok(())
}

/// Counts `(gt, pred)` pairs over pixels whose ground truth is not `ignore`.
pub fn confusion(
    pred: &[u8],
    gt: &[u8],
    classes: usize,
    ignore: u8,
) -> Result<ConfusionMatrix, MetricsError> {
    check_sizes(pred, gt)?;
    let mut cm = ConfusionMatrix::new(classes);
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        if g == ignore {
            continue;
        }
        for v in [g, p] {
            if v as usize >= classes {
                return Err(MetricsError::LabelOutOfRange {
                    index: i,
                    value: v,
                    classes,
                });
            }
        }
        cm.counts[g as usize * classes + p as usize] += 1;
    }
    Ok(cm)
}

/// `(mIoU, aAcc)`; the mean skips classes absent from both maps.
pub fn miou_aacc(cm: &ConfusionMatrix) -> Result<(f64, f64), MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    let ious: Vec<f64> = cm.per_class_iou().into_iter().flatten().collect();
    let miou = ious.iter().sum::<f64>() / ious.len() as f64;
    let trace: u64 = (0..cm.classes).map(|c| cm.get(c, c)).sum();
    Ok((miou, trace as f64 / total as f64))
}

/// Class-wise intersection and union counts on the boundary support.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundaryIouCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl BoundaryIouCounts {
    pub fn new(classes: usize) -> Self {
        Self {
            intersection: vec![0; classes],
            union: vec![0; classes],
        }
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.intersection.iter_mut().zip(&other.intersection) {
            *a += b;
        }
        for (a, b) in self.union.iter_mut().zip(&other.union) {
            *a += b;
        }
    }

    /// Mean IoU over classes with a nonempty union; 1.0 when there is none.
    pub fn value(&self) -> f64 {
        let ious: Vec<f64> = self
            .intersection
            .iter()
            .zip(&self.union)
            .filter(|(_, &u)| u > 0)
            .map(|(&i, &u)| i as f64 / u as f64)
            .collect();
        if ious.is_empty() {
            1.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }
}

/// Counts for [`boundary_iou`] restricted to the union of both maps'
/// `d`-bands, skipping ignored ground truth.
pub fn boundary_iou_counts(
    pred: &[u8],
    gt: &[u8],
    h: usize,
    w: usize,
    d: usize,
    classes: usize,
    ignore: u8,
) -> Result<BoundaryIouCounts, MetricsError> {
    check_sizes(pred, gt)?;
    let bp = boundary_band(pred, h, w, d);
    let bg = boundary_band(gt, h, w, d);
    let mut out = BoundaryIouCounts::new(classes);
    for i in 0..pred.len() {
        if !(bp[i] || bg[i]) || gt[i] == ignore {
            continue;
        }
        let (p, g) = (pred[i] as usize, gt[i] as usize);
        for (v, value) in [(g, gt[i]), (p, pred[i])] {
            if v >= classes {
                return Err(MetricsError::LabelOutOfRange {
                    index: i,
                    value,
                    classes,
                });
            }
        }
        out.union[p] += 1;
        if p == g {
            out.intersection[p] += 1;
        } else {
            out.union[g] += 1;
        }
    }
    Ok(out)
}

pub fn boundary_iou(
    pred: &[u8],
    gt: &[u8],
    h: usize,
    w: usize,
    d: usize,
    classes: usize,
    ignore: u8,
) -> Result<f64, MetricsError> {
    Ok(boundary_iou_counts(pred, gt, h, w, d, classes, ignore)?.value())
}

/// Matched and total boundary pixel counts for [`boundary_f1`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BoundaryF1Counts {
    pub pred_matched: u64,
    pub pred_total: u64,
    pub gt_matched: u64,
    pub gt_total: u64,
}

impl BoundaryF1Counts {
    pub fn merge(&mut self, o: &Self) {
        self.pred_matched += o.pred_matched;
        self.pred_total += o.pred_total;
        self.gt_matched += o.gt_matched;
        self.gt_total += o.gt_total;
    }

    /// Harmonic mean of precision and recall; 1.0 when both sets are empty.
    pub fn value(&self) -> f64 {
        if self.pred_total == 0 && self.gt_total == 0 {
            return 1.0;
        }
        if self.pred_total == 0 || self.gt_total == 0 {
            return 0.0;
        }
        let p = self.pred_matched as f64 / self.pred_total as f64;
        let r = self.gt_matched as f64 / self.gt_total as f64;
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// Boundary pixels (those with a differently labelled 8-neighbour) matched
/// within Chebyshev tolerance `t`.
pub fn boundary_f1_counts(
    pred: &[u8],
    gt: &[u8],
    h: usize,
    w: usize,
    t: usize,
) -> Result<BoundaryF1Counts, MetricsError> {
    check_sizes(pred, gt)?;
    let bp = boundary_band(pred, h, w, 1);
    let bg = boundary_band(gt, h, w, 1);
    let near_p = dilate(&bp, h, w, t);
    let near_g = dilate(&bg, h, w, t);
    let mut c = BoundaryF1Counts::default();
    for i in 0..pred.len() {
        if bp[i] {
            c.pred_total += 1;
            c.pred_matched += near_g[i] as u64;
        }
        if bg[i] {
            c.gt_total += 1;
            c.gt_matched += near_p[i] as u64;
        }
    }
    Ok(c)
}

pub fn boundary_f1(
    pred: &[u8],
    gt: &[u8],
    h: usize,
    w: usize,
    t: usize,
) -> Result<f64, MetricsError> {
    Ok(boundary_f1_counts(pred, gt, h, w, t)?.value())
}

/// Class names used for report columns.
pub const CLASS_NAMES: [&str; 6] = [
    "smooth",
    "rough",
    "bumpy",
    "forbidden",
    "obstacle",
    "background",
];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// `NaN` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<f64>,
    pub miou: f64,
    pub aacc: f64,
    pub biou: f64,
    pub boundary_f1: f64,
}

/// Evaluation settings for [`MetricsAccumulator`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MetricsConfig {
    pub classes: usize,
    pub band: usize,
    pub tolerance: usize,
    pub ignore: u8,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            classes: 6,
            band: 2,
            tolerance: 1,
            ignore: crate::loss::IGNORE_INDEX,
        }
    }
}

/// Pools per-image counts into dataset-level metrics.
#[derive(Clone, Debug)]
pub struct MetricsAccumulator {
    pub cfg: MetricsConfig,
    pub confusion: ConfusionMatrix,
    pub biou: BoundaryIouCounts,
    pub f1: BoundaryF1Counts,
}

impl MetricsAccumulator {
    pub fn new(cfg: MetricsConfig) -> Self {
        Self {
            cfg,
            confusion: ConfusionMatrix::new(cfg.classes),
            biou: BoundaryIouCounts::new(cfg.classes),
            f1: BoundaryF1Counts::default(),
        }
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8], h: usize, w: usize) -> Result<(), MetricsError> {
        let c = self.cfg;
        self.confusion
            .merge(&confusion(pred, gt, c.classes, c.ignore)?);
        self.biou.merge(&boundary_iou_counts(
            pred, gt, h, w, c.band, c.classes, c.ignore,
        )?);
        self.f1
            .merge(&boundary_f1_counts(pred, gt, h, w, c.tolerance)?);
        Ok(())
    }

    pub fn report(&self) -> Result<MetricsReport, MetricsError> {
        let (miou, aacc) = miou_aacc(&self.confusion)?;
        Ok(MetricsReport {
            per_class_iou: self
                .confusion
                .per_class_iou()
                .into_iter()
                .map(|v| v.unwrap_or(f64::NAN))
                .collect(),
            miou,
            aacc,
            biou: self.biou.value(),
            boundary_f1: self.f1.value(),
        })
    }
}
