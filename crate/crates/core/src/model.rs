//! The assembled decoder and its ablation variants.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bgc::{Bgc, BgcConfig, StructuralBuffer};
use crate::data::{Image, LabelMap, NUM_CLASSES};
use crate::encoder::{Encoder, FeaturePyramid};
use crate::gcs::{CoarseHead, GatePreset, Gcs, GcsOutput};
use crate::gltr::{Aggregator, Gltr, GltrOutput};
use crate::loss::{total_loss, LossConfig, LossInputs, LossParts};
use crate::nn::{grid_to_tokens, tokens_to_grid};
use crate::point::{PointHead, PointOutput};
use crate::tensor::{invalid, Mode, ParamId, ParamStore, Real, Result, Session, Tensor, Var};

/// Cumulative ablation chain, each step adding one component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "gltr")]
    Gltr,
    #[serde(rename = "bgc")]
    Bgc,
    #[serde(rename = "gcs-no-point")]
    GcsNoPoint,
    #[serde(rename = "gcs-point")]
    GcsPoint,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Self::Baseline,
        Self::Gltr,
        Self::Bgc,
        Self::GcsNoPoint,
        Self::GcsPoint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "Baseline",
            Self::Gltr => "+GLTR",
            Self::Bgc => "+BGC",
            Self::GcsNoPoint => "+GCS-no-point",
            Self::GcsPoint => "+GCS-point",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Gltr => "gltr",
            Self::Bgc => "bgc",
            Self::GcsNoPoint => "gcs-no-point",
            Self::GcsPoint => "gcs-point",
        }
    }

    /// `(gltr, bgc, gated, point_refine)`.
    pub fn flags(self) -> (bool, bool, bool, bool) {
        match self {
            Self::Baseline => (false, false, false, false),
            Self::Gltr => (true, false, false, false),
            Self::Bgc => (true, true, false, false),
            Self::GcsNoPoint => (true, true, true, false),
            Self::GcsPoint => (true, true, true, true),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown variant {0:?}; expected one of baseline, gltr, bgc, gcs-no-point, gcs-point")]
pub struct UnknownVariant(pub String);

impl FromStr for Variant {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.key() == s || v.name() == s)
            .ok_or_else(|| UnknownVariant(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub widths: Vec<usize>,
    pub embed_dim: usize,
    pub key_dim: usize,
    pub num_classes: usize,
    pub edge_dim: usize,
    pub grid_dim: usize,
    pub pool: usize,
    pub point_hidden: Vec<usize>,
    pub point_budget: f64,
    pub gate: GatePreset,
    pub gltr: bool,
    pub bgc: bool,
    pub gated: bool,
    pub point_refine: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 128],
            embed_dim: 32,
            key_dim: 32,
            num_classes: NUM_CLASSES,
            edge_dim: 16,
            grid_dim: 16,
            pool: 2,
            point_hidden: vec![64, 64],
            point_budget: 0.01,
            gate: GatePreset::default(),
            gltr: true,
            bgc: true,
            gated: true,
            point_refine: true,
        }
    }
}

impl ModelConfig {
    pub fn for_variant(v: Variant) -> Self {
        Self::default().with_variant(v)
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        (self.gltr, self.bgc, self.gated, self.point_refine) = v.flags();
        self
    }

    /// The variant whose module flags match, if any.
    pub fn variant(&self) -> Option<Variant> {
        let f = (self.gltr, self.bgc, self.gated, self.point_refine);
        Variant::ALL.into_iter().find(|v| v.flags() == f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != 4 {
            return Err(invalid(
                "model_config",
                "the encoder has exactly four levels",
            ));
        }
        if self.gated && !self.bgc {
            return Err(invalid(
                "model_config",
                "gating needs the structural buffer",
            ));
        }
        if self.num_classes < 2 {
            return Err(invalid("model_config", "at least two classes are required"));
        }
        if !(0.0..=1.0).contains(&self.point_budget) {
            return Err(invalid(
                "model_config",
                "point budget must be a fraction in [0, 1]",
            ));
        }
        Ok(())
    }
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub pyramid: FeaturePyramid,
    /// `[B, L]` level weights.
    pub level_weights: Var,
    /// Lattices `[B, C, H0, W0]`.
    pub t0: Var,
    pub gltr: Option<GltrOutput>,
    pub t2: Var,
    pub buffer: Option<StructuralBuffer>,
    pub gcs: Option<GcsOutput>,
    pub t3: Var,
    /// Head logits `[B, N_class, H, W]` before point refinement.
    pub coarse: Var,
    pub point: Option<PointOutput>,
    /// Final logits.
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct CstrModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub encoder: Encoder,
    pub aggregator: Aggregator,
    pub gltr: Option<Gltr>,
    pub bgc: Option<Bgc>,
    pub gcs: Option<Gcs>,
    pub head: CoarseHead,
    pub point: Option<PointHead>,
}

impl<T: Real> CstrModel<T> {
    /// Builds and initialises the model from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = config.embed_dim;
        let encoder = Encoder::new(&mut params, &mut rng, Image::CHANNELS, &config.widths);
        let aggregator = Aggregator::new(&mut params, &mut rng, &config.widths, c, config.gltr);
        let gltr = config
            .gltr
            .then(|| Gltr::new(&mut params, &mut rng, c, config.key_dim, config.num_classes));
        let uses_texture = config.gated && config.gate.uses_texture();
        let bgc = config.bgc.then(|| {
            Bgc::new(
                &mut params,
                &mut rng,
                &BgcConfig {
                    fine_channels: config.widths[1],
                    edge_dim: config.edge_dim,
                    grid_dim: config.grid_dim,
                    pool: config.pool,
                    key_dim: config.key_dim,
                    value_dim: c,
                    texture: uses_texture,
                },
            )
        });
        let gcs = config.bgc.then(|| {
            Gcs::new(
                &mut params,
                &mut rng,
                c,
                config.key_dim,
                config.gated.then_some(config.gate),
            )
        });
        let head = CoarseHead::new(&mut params, &mut rng, c, config.num_classes);
        let point = config.point_refine.then(|| {
            PointHead::new(
                &mut params,
                &mut rng,
                c + config.widths[1],
                &config.point_hidden,
                config.num_classes,
                config.point_budget,
            )
        });
        Ok(Self {
            config,
            params,
            encoder,
            aggregator,
            gltr,
            bgc,
            gcs,
            head,
            point,
        })
    }

    /// Same layout with every parameter converted to `U`.
    pub fn cast<U: Real>(&self) -> CstrModel<U> {
        CstrModel {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            aggregator: self.aggregator.clone(),
            gltr: self.gltr.clone(),
            bgc: self.bgc.clone(),
            gcs: self.gcs.clone(),
            head: self.head.clone(),
            point: self.point.clone(),
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(_, e)| e.value.numel())
            .sum()
    }

    /// Parameters of the point head, empty without one.
    pub fn point_params(&self) -> Vec<ParamId> {
        self.point.as_ref().map(|p| p.params()).unwrap_or_default()
    }

    pub fn forward(&self, s: &mut Session<'_, T>, images: Var) -> Result<ModelOutput> {
        let (h, w) = (s.graph.shape(images)[2], s.graph.shape(images)[3]);
        let pyramid = self.encoder.forward(s, images)?;
        let (level_weights, t0) = self.aggregator.forward(s, &pyramid)?;
        let (h0, w0) = (s.graph.shape(t0)[2], s.graph.shape(t0)[3]);
        let gltr = match &self.gltr {
            Some(g) => Some(g.forward(s, t0)?),
            None => None,
        };
        let t2 = gltr.map_or(t0, |g| g.t2);
        let buffer = match &self.bgc {
            Some(b) => Some(b.forward(s, pyramid.fine())?),
            None => None,
        };
        let (gcs, t3) = match (&self.gcs, &buffer) {
            (Some(g), Some(buf)) => {
                let t2_tok = grid_to_tokens(s, t2)?;
                let t0_tok = grid_to_tokens(s, t0)?;
                let out = g.forward(s, t2_tok, t0_tok, buf)?;
                let t3 = tokens_to_grid(s, out.t3, h0, w0)?;
                (Some(out), t3)
            }
            _ => (None, t2),
        };
        let coarse = self.head.forward(s, t3, h, w)?;
        let point = match &self.point {
            Some(p) => Some(p.forward(s, coarse, t3, pyramid.fine())?),
            None => None,
        };
        let logits = point.as_ref().map_or(coarse, |p| p.refined);
        Ok(ModelOutput {
            pyramid,
            level_weights,
            t0,
            gltr,
            t2,
            buffer,
            gcs,
            t3,
            coarse,
            point,
            logits,
        })
    }

    /// Training objective for a forward pass on `labels` (`B·H·W`).
    pub fn loss(
        &self,
        s: &mut Session<'_, T>,
        out: &ModelOutput,
        labels: &[u8],
        cfg: &LossConfig,
    ) -> Result<LossParts> {
        let flat = out
            .point
            .as_ref()
            .map(|p| p.flat_points())
            .unwrap_or_default();
        let (h0, w0) = (s.graph.shape(out.t0)[2], s.graph.shape(out.t0)[3]);
        let inputs = LossInputs {
            refined: out.logits,
            point_logits: out.point.as_ref().and_then(|p| p.point_logits),
            points: &flat,
            log_attn: out.gltr.map(|g| (g.attention.log_attn, h0, w0)),
            labels,
        };
        total_loss(s, inputs, cfg)
    }

    /// Arg-max labels in evaluation mode.
    pub fn predict(&self, images: &[&Image]) -> Result<Vec<LabelMap>> {
        let mut s = Session::new(&self.params, Mode::Eval);
        let x = s.graph.constant(images_to_tensor(images)?);
        let out = self.forward(&mut s, x)?;
        Ok(argmax_labels(s.value(out.logits)))
    }
}

/// Stacks images into `[B, 3, H, W]`, mapping bytes to roughly unit scale.
pub fn images_to_tensor<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| invalid("images_to_tensor", "empty batch"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(invalid(
                "images_to_tensor",
                "images in a batch must share their size",
            ));
        }
        data.extend(
            img.data
                .iter()
                .map(|&v| T::of((v as f64 / 255.0 - 0.5) * 4.0)),
        );
    }
    Tensor::new(&[images.len(), 3, h, w], data)
}

/// Per-pixel arg-max of `[B, N_class, H, W]` logits; ties take the lower class.
pub fn argmax_labels<T: Real>(logits: &Tensor<T>) -> Vec<LabelMap> {
    let sh = logits.shape();
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let d = logits.data();
    (0..b)
        .map(|bi| {
            let data = (0..h * w)
                .map(|i| {
                    let mut best = 0;
                    for ch in 1..c {
                        if d[(bi * c + ch) * h * w + i] > d[(bi * c + best) * h * w + i] {
                            best = ch;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap::new(h, w, data)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_and_flags() {
        for v in Variant::ALL {
            assert_eq!(v.key().parse::<Variant>().unwrap(), v);
            assert_eq!(ModelConfig::for_variant(v).variant(), Some(v));
        }
        assert!("full".parse::<Variant>().is_err());
        assert_eq!(ModelConfig::default().variant(), Some(Variant::GcsPoint));
    }

    #[test]
    fn gating_without_buffer_is_rejected() {
        let cfg = ModelConfig {
            bgc: false,
            ..Default::default()
        };
        assert!(CstrModel::<f32>::new(cfg, 0).is_err());
    }

    #[test]
    fn full_model_shapes() {
        let model = CstrModel::<f32>::new(ModelConfig::default(), 0).unwrap();
        let img = Image::new(64, 64, (0..3 * 64 * 64).map(|i| (i % 251) as u8).collect());
        let mut s = Session::new(&model.params, Mode::Train);
        let x = s.graph.constant(images_to_tensor(&[&img, &img]).unwrap());
        let out = model.forward(&mut s, x).unwrap();
        assert_eq!(s.graph.shape(out.t0), &[2, 32, 4, 4]);
        assert_eq!(s.graph.shape(out.t3), &[2, 32, 4, 4]);
        assert_eq!(s.graph.shape(out.logits), &[2, 6, 64, 64]);
        assert_eq!(out.buffer.unwrap().len(), 256);
        assert_eq!(out.point.as_ref().unwrap().points[0].len(), 41);
        assert_eq!(s.fuse_calls(), 1);
    }
}
