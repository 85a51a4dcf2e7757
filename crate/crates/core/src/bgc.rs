//! Boundary-guided correction: structural cues from the fine feature map.
//!
//! An edge path (fixed Sobel magnitude, then a learnable pointwise
//! projection) and a grid path (average pooling, pointwise projection,
//! upsampling) are concatenated and projected into a key/value buffer over
//! every fine-scale position. The buffer is only ever read by cross-scale
//! attention; nothing writes into the semantic tokens from here.

use rand::Rng;

use crate::nn::{fan_in_uniform, grid_to_tokens};
use crate::tensor::kernels::ConvGeometry;
use crate::tensor::{ParamId, ParamStore, Real, Result, Session, Tensor, Var};

const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Per-channel Sobel gradient magnitude with zero padding 1.
pub fn sobel_magnitude<T: Real>(s: &mut Session<'_, T>, x: Var) -> Result<Var> {
    let c = s.graph.shape(x)[1];
    let kernel = |k: &[f64; 9]| {
        let data: Vec<f64> = (0..c).flat_map(|_| k.iter().copied()).collect();
        Tensor::from_f64(&[c, 1, 3, 3], &data)
    };
    let kx = s.graph.constant(kernel(&SOBEL_X)?);
    let ky = s.graph.constant(kernel(&SOBEL_Y)?);
    let geom = ConvGeometry {
        stride: 1,
        padding: 1,
        groups: c,
    };
    let gx = s.graph.conv2d(x, kx, None, geom)?;
    let gy = s.graph.conv2d(x, ky, None, geom)?;
    s.graph.magnitude(gx, gy)
}

/// Sobel magnitude followed by the pointwise projection `w: [C_e, C, 1, 1]`.
pub fn edge_path<T: Real>(s: &mut Session<'_, T>, x: Var, w: Var) -> Result<Var> {
    let m = sobel_magnitude(s, x)?;
    s.graph.conv2d(m, w, None, ConvGeometry::default())
}

/// `k × k` average pooling, pointwise projection `w`, upsampling back.
pub fn grid_path<T: Real>(s: &mut Session<'_, T>, x: Var, w: Var, k: usize) -> Result<Var> {
    let (h, wd) = (s.graph.shape(x)[2], s.graph.shape(x)[3]);
    let p = s.graph.avg_pool(x, k)?;
    let p = s.graph.conv2d(p, w, None, ConvGeometry::default())?;
    s.graph.resize(p, h, wd)
}

/// Fine-scale key/value tokens, `M = H_s · W_s` of them, row-major.
#[derive(Clone, Copy, Debug)]
pub struct StructuralBuffer {
    keys: Var,
    values: Var,
    texture: Option<Var>,
    extent: (usize, usize),
}

impl StructuralBuffer {
    /// `[B, M, d_k]`.
    pub fn keys(&self) -> Var {
        self.keys
    }

    /// `[B, M, C]`.
    pub fn values(&self) -> Var {
        self.values
    }

    /// Second value readout `[B, M, C]`, present when the gate consumes it.
    pub fn texture(&self) -> Option<Var> {
        self.texture
    }

    pub fn extent(&self) -> (usize, usize) {
        self.extent
    }

    pub fn len(&self) -> usize {
        self.extent.0 * self.extent.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Concatenates the two paths and projects them into keys, values and the
/// optional texture values (all `[B, M, ·]`).
pub fn build_buffer<T: Real>(
    s: &mut Session<'_, T>,
    edge: Var,
    grid: Var,
    w_key: Var,
    w_value: Var,
    w_texture: Option<Var>,
) -> Result<StructuralBuffer> {
    let cues = s.graph.concat(&[edge, grid], 1)?;
    let extent = (s.graph.shape(cues)[2], s.graph.shape(cues)[3]);
    let tokens = grid_to_tokens(s, cues)?;
    let keys = s.graph.matmul(tokens, w_key)?;
    let values = s.graph.matmul(tokens, w_value)?;
    let texture = match w_texture {
        Some(w) => Some(s.graph.matmul(tokens, w)?),
        None => None,
    };
    Ok(StructuralBuffer {
        keys,
        values,
        texture,
        extent,
    })
}

#[derive(Clone, Debug)]
pub struct BgcConfig {
    pub fine_channels: usize,
    pub edge_dim: usize,
    pub grid_dim: usize,
    pub pool: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub texture: bool,
}

#[derive(Clone, Debug)]
pub struct Bgc {
    pub edge_proj: ParamId,
    pub grid_proj: ParamId,
    pub w_key: ParamId,
    pub w_value: ParamId,
    pub w_texture: Option<ParamId>,
    pub pool: usize,
}

impl Bgc {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, cfg: &BgcConfig) -> Self {
        let cs = cfg.fine_channels;
        let cues = cfg.edge_dim + cfg.grid_dim;
        let edge_proj = store.add(
            "bgc.edge.proj",
            fan_in_uniform(rng, &[cfg.edge_dim, cs, 1, 1], cs),
            true,
        );
        let grid_proj = store.add(
            "bgc.grid.proj",
            fan_in_uniform(rng, &[cfg.grid_dim, cs, 1, 1], cs),
            true,
        );
        let w_key = store.add(
            "bgc.w_key",
            fan_in_uniform(rng, &[cues, cfg.key_dim], cues),
            true,
        );
        let w_value = store.add(
            "bgc.w_value",
            fan_in_uniform(rng, &[cues, cfg.value_dim], cues),
            true,
        );
        let w_texture = cfg.texture.then(|| {
            store.add(
                "bgc.w_texture",
                fan_in_uniform(rng, &[cues, cfg.value_dim], cues),
                true,
            )
        });
        Self {
            edge_proj,
            grid_proj,
            w_key,
            w_value,
            w_texture,
            pool: cfg.pool,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = vec![self.edge_proj, self.grid_proj, self.w_key, self.w_value];
        out.extend(self.w_texture);
        out
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, fine: Var) -> Result<StructuralBuffer> {
        let we = s.param(self.edge_proj);
        let wg = s.param(self.grid_proj);
        let edge = edge_path(s, fine, we)?;
        let grid = grid_path(s, fine, wg, self.pool)?;
        let wk = s.param(self.w_key);
        let wv = s.param(self.w_value);
        let wt = self.w_texture.map(|id| s.param(id));
        build_buffer(s, edge, grid, wk, wv, wt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mode;

    #[test]
    fn constant_input_has_zero_interior_gradient() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store, Mode::Eval);
        let x = s.graph.constant(Tensor::full(&[1, 2, 6, 6], 3.5));
        let m = sobel_magnitude(&mut s, x).unwrap();
        assert_eq!(s.graph.shape(m), &[1, 2, 6, 6]);
        for c in 0..2 {
            for y in 1..5 {
                for xx in 1..5 {
                    assert_eq!(s.value(m).get(&[0, c, y, xx]), 0.0);
                }
            }
        }
    }

    #[test]
    fn vertical_step_has_magnitude_four() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store, Mode::Eval);
        let data: Vec<f64> = (0..36)
            .map(|i| if i % 6 >= 3 { 1.0 } else { 0.0 })
            .collect();
        let x = s
            .graph
            .constant(Tensor::from_f64(&[1, 1, 6, 6], &data).unwrap());
        let m = sobel_magnitude(&mut s, x).unwrap();
        for y in 1..5 {
            assert_eq!(s.value(m).get(&[0, 0, y, 2]), 4.0);
            assert_eq!(s.value(m).get(&[0, 0, y, 3]), 4.0);
            assert_eq!(s.value(m).get(&[0, 0, y, 1]), 0.0);
        }
    }

    #[test]
    fn grid_path_averages_cells() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store, Mode::Eval);
        let x = s
            .graph
            .constant(Tensor::from_f64(&[1, 1, 2, 2], &[0.0, 2.0, 0.0, 2.0]).unwrap());
        let w = s.graph.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = grid_path(&mut s, x, w, 2).unwrap();
        assert_eq!(s.value(y).data(), &[1.0; 4]);
        let x = s.graph.constant(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(grid_path(&mut s, x, w, 2).is_err());
    }
}
