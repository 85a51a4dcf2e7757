//! Gated cross-scale interaction and the coarse logit head.
//!
//! Lattice tokens query the structural buffer once (`F_cs`). The readout is
//! injected as `T3 = T2 + g ⊙ F_cs` where the gate `g` is the sigmoid of a sum
//! of per-input linear projections; which inputs feed the gate is selected by
//! a [`GatePreset`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bgc::StructuralBuffer;
use crate::nn::{Conv2d, ConvSpec, Projection};
use crate::tensor::{invalid, ParamId, ParamStore, Real, Result, Session, Tensor, Var};

/// Inputs to the fusion gate. The cross-attention readout is always present.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GatePreset {
    #[serde(rename = "ca")]
    Ca,
    #[serde(rename = "ca-t0")]
    CaT0,
    #[serde(rename = "ca-tb")]
    CaTb,
    #[default]
    #[serde(rename = "ca-tb-t0")]
    CaTbT0,
}

impl GatePreset {
    pub const ALL: [GatePreset; 4] = [Self::Ca, Self::CaT0, Self::CaTb, Self::CaTbT0];

    /// Display name, e.g. `"3-way CA+TB+T0"`.
    pub fn name(self) -> &'static str {
        match self {
            Self::Ca => "1-way CA",
            Self::CaT0 => "2-way CA+T0",
            Self::CaTb => "2-way CA+TB",
            Self::CaTbT0 => "3-way CA+TB+T0",
        }
    }

    /// Command-line spelling.
    pub fn key(self) -> &'static str {
        match self {
            Self::Ca => "ca",
            Self::CaT0 => "ca-t0",
            Self::CaTb => "ca-tb",
            Self::CaTbT0 => "ca-tb-t0",
        }
    }

    pub fn uses_texture(self) -> bool {
        matches!(self, Self::CaTb | Self::CaTbT0)
    }

    pub fn uses_t0(self) -> bool {
        matches!(self, Self::CaT0 | Self::CaTbT0)
    }
}

impl fmt::Display for GatePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown gate configuration {0:?}; expected one of ca, ca-t0, ca-tb, ca-tb-t0")]
pub struct UnknownGate(pub String);

impl FromStr for GatePreset {
    type Err = UnknownGate;

    /// Accepts either the command-line key or the display name.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.key() == s || p.name() == s)
            .ok_or_else(|| UnknownGate(s.to_string()))
    }
}

/// Attention readouts of the buffer for every lattice token.
#[derive(Clone, Copy, Debug)]
pub struct CrossScale {
    /// `[B, N, M]`, rows sum to one.
    pub attn: Var,
    /// `[B, N, C]`.
    pub f_cs: Var,
    /// Texture readout with the same attention weights, `[B, N, C]`.
    pub tb: Option<Var>,
}

/// `softmax(Q K_s^T / √d_k) V_s` for `queries: [B, N, d_k]`.
pub fn cross_scale_attention<T: Real>(
    s: &mut Session<'_, T>,
    queries: Var,
    buffer: &StructuralBuffer,
) -> Result<CrossScale> {
    let d = s.graph.shape(queries)[2];
    let dk = s.graph.shape(buffer.keys())[2];
    if d != dk {
        return Err(invalid(
            "cross_scale_attention",
            format!("query dim {d} vs key dim {dk}"),
        ));
    }
    let scores = s.graph.matmul_t(queries, buffer.keys(), false, true)?;
    let scores = s.graph.scale(scores, T::of(1.0 / (d as f64).sqrt()));
    let attn = s.graph.softmax(scores, 2)?;
    let f_cs = s.graph.matmul(attn, buffer.values())?;
    let tb = match buffer.texture() {
        Some(v) => Some(s.graph.matmul(attn, v)?),
        None => None,
    };
    Ok(CrossScale { attn, f_cs, tb })
}

/// `σ(Σ_i x_i · W_i + b)`, applied per token and channel.
pub fn gate<T: Real>(
    s: &mut Session<'_, T>,
    terms: &[(Var, Var)],
    bias: Option<Var>,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(x, w) in terms {
        let p = s.graph.matmul(x, w)?;
        acc = Some(match acc {
            Some(a) => s.graph.add(a, p)?,
            None => p,
        });
    }
    let mut pre = acc.ok_or_else(|| invalid("gate", "no gate inputs"))?;
    if let Some(b) = bias {
        pre = s.graph.add(pre, b)?;
    }
    Ok(s.graph.sigmoid(pre))
}

/// `T3 = T2 + g ⊙ F_cs`, or `T2 + F_cs` without a gate. Counted once per call.
pub fn fuse<T: Real>(s: &mut Session<'_, T>, t2: Var, f_cs: Var, g: Option<Var>) -> Result<Var> {
    s.note_fuse();
    let inject = match g {
        Some(g) => s.graph.mul(g, f_cs)?,
        None => f_cs,
    };
    s.graph.add(t2, inject)
}

#[derive(Clone, Debug)]
pub struct Gate {
    pub preset: GatePreset,
    pub w_t: Projection,
    pub bias: ParamId,
    pub w_s: Projection,
    pub w_b: Option<Projection>,
    pub w_0: Option<Projection>,
}

impl Gate {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        preset: GatePreset,
        dim: usize,
    ) -> Self {
        Self {
            preset,
            w_t: Projection::new(store, rng, "gcs.gate.w_t", dim, dim),
            bias: store.add("gcs.gate.bias", Tensor::zeros(&[dim]), true),
            w_s: Projection::new(store, rng, "gcs.gate.w_s", dim, dim),
            w_b: preset
                .uses_texture()
                .then(|| Projection::new(store, rng, "gcs.gate.w_b", dim, dim)),
            w_0: preset
                .uses_t0()
                .then(|| Projection::new(store, rng, "gcs.gate.w_0", dim, dim)),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = vec![self.w_t.weight, self.bias, self.w_s.weight];
        out.extend(self.w_b.iter().map(|p| p.weight));
        out.extend(self.w_0.iter().map(|p| p.weight));
        out
    }

    /// Gate over token inputs `[B, N, C]`.
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        t2: Var,
        cross: &CrossScale,
        t0: Var,
    ) -> Result<Var> {
        let mut terms = vec![
            (t2, s.param(self.w_t.weight)),
            (cross.f_cs, s.param(self.w_s.weight)),
        ];
        if let Some(w) = &self.w_b {
            let tb = cross
                .tb
                .ok_or_else(|| invalid("gate", "texture readout missing from the buffer"))?;
            terms.push((tb, s.param(w.weight)));
        }
        if let Some(w) = &self.w_0 {
            terms.push((t0, s.param(w.weight)));
        }
        let b = s.param(self.bias);
        gate(s, &terms, Some(b))
    }
}

/// Token queries, the optional gate and the fusion step.
#[derive(Clone, Debug)]
pub struct Gcs {
    pub w_q: Projection,
    pub gate: Option<Gate>,
}

/// Output of [`Gcs::forward`], all in token layout `[B, N, ·]`.
#[derive(Clone, Copy, Debug)]
pub struct GcsOutput {
    pub cross: CrossScale,
    pub gate: Option<Var>,
    pub t3: Var,
}

impl Gcs {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        dim: usize,
        key_dim: usize,
        gate: Option<GatePreset>,
    ) -> Self {
        Self {
            w_q: Projection::new(store, rng, "gcs.w_q", dim, key_dim),
            gate: gate.map(|p| Gate::new(store, rng, p, dim)),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = vec![self.w_q.weight];
        if let Some(g) = &self.gate {
            out.extend(g.params());
        }
        out
    }

    pub fn forward<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        t2: Var,
        t0: Var,
        buffer: &StructuralBuffer,
    ) -> Result<GcsOutput> {
        let q = self.w_q.forward(s, t2)?;
        let cross = cross_scale_attention(s, q, buffer)?;
        let g = match &self.gate {
            Some(gate) => Some(gate.forward(s, t2, &cross, t0)?),
            None => None,
        };
        let t3 = fuse(s, t2, cross.f_cs, g)?;
        Ok(GcsOutput { cross, gate: g, t3 })
    }
}

/// Pointwise projection to class scores, upsampled to the image size.
#[derive(Clone, Debug)]
pub struct CoarseHead {
    pub conv: Conv2d,
}

impl CoarseHead {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        dim: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            conv: Conv2d::new(store, rng, "head", ConvSpec::pointwise(dim, num_classes)),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.conv.params()
    }

    /// `lattice: [B, C, H0, W0]` to logits `[B, N_class, H, W]`.
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        lattice: Var,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let z = self.conv.forward(s, lattice)?;
        s.graph.resize(z, h, w)
    }
}
