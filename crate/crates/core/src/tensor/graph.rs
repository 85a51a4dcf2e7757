//! Reverse-mode tape.
//!
//! A [`Graph`] is an append-only list of nodes. Each node stores its forward
//! value and the operation that produced it; [`Graph::backward`] walks the list
//! in reverse and applies each operation's vector-Jacobian product.

use super::kernels::{self, ConvDims, ConvGeometry};
use super::{gemm, invalid, numel, MatRef, Real, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// A continuous sampling location `(y, x)` inside batch item `batch`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointCoord {
    pub batch: usize,
    pub y: f64,
    pub x: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Exp,
    Log,
    Sigmoid,
    Relu,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary(BinaryKind, Var, Var),
    Unary(UnaryKind, Var),
    Scale(Var, T),
    Magnitude(Var, Var),
    SumAll(Var),
    SumAxis(Var, usize),
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Nll {
        logp: Var,
        axis: usize,
        targets: Vec<Option<usize>>,
        weights: Vec<T>,
        total: T,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Resize(Var),
    AvgPool(Var, usize),
    SamplePoints(Var, Vec<PointCoord>),
    ScatterAdd {
        base: Var,
        src: Var,
        points: Vec<(usize, usize, usize)>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat(Vec<Var>, usize),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node that requires one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn check_finite<T: Real>(data: &[T], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn add_into<T: Real>(slot: &mut Option<Tensor<T>>, shape: &[usize], data: Vec<T>) {
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(data) {
                *a += b;
            }
        }
        None => {
            *slot = Some(Tensor::new(shape, data).expect("gradient shape matches its node"));
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = kernels::broadcast_shape(&sa, &sb).ok_or(TensorError::ShapeMismatch {
            op: "broadcast",
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = match kind {
            BinaryKind::Add => {
                kernels::broadcast_binary(da, &sa, db, &sb, &out_shape, |x, y| x + y)
            }
            BinaryKind::Sub => {
                kernels::broadcast_binary(da, &sa, db, &sb, &out_shape, |x, y| x - y)
            }
            BinaryKind::Mul => {
                kernels::broadcast_binary(da, &sa, db, &sb, &out_shape, |x, y| x * y)
            }
            BinaryKind::Div => {
                kernels::broadcast_binary(da, &sa, db, &sb, &out_shape, |x, y| x / y)
            }
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Binary(kind, a, b), rg))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let f: fn(T) -> T = match kind {
            UnaryKind::Exp => |v| v.exp(),
            UnaryKind::Log => |v| v.ln(),
            UnaryKind::Sigmoid => |v| T::one() / (T::one() + (-v).exp()),
            UnaryKind::Relu => |v| if v > T::zero() { v } else { T::zero() },
        };
        let value = self.value(x).map(f);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Unary(kind, x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// Elementwise `sqrt(a² + b²)`; the gradient at the origin is taken as zero.
    pub fn magnitude(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "magnitude",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x * x + y * y).sqrt())
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Magnitude(a, b), rg))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, T::of(1.0 / n as f64))
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(invalid(
                "sum_axis",
                format!("axis {axis} for shape {shape:?}"),
            ));
        }
        let (outer, n, inner) = kernels::axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * n + j) * inner + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::SumAxis(x, axis), rg))
    }

    /// Mean over the given axes (kept with extent 1).
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut v = x;
        let mut count = 1usize;
        for &a in axes {
            v = self.sum_axis(v, a)?;
            count *= shape[a];
        }
        Ok(self.scale(v, T::of(1.0 / count.max(1) as f64)))
    }

    /// Matrix product of rank-2 or rank-3 operands. A rank-2 operand (or a
    /// rank-3 operand with batch 1) is shared across the other's batch.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = MatMulDims::new(&sa, &sb, trans_a, trans_b)?;
        let mut out = vec![T::zero(); dims.batch * dims.m * dims.n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for bi in 0..dims.batch {
            let am = dims.a_mat(da, bi);
            let bm = dims.b_mat(db, bi);
            gemm(
                am,
                bm,
                &mut out[bi * dims.m * dims.n..][..dims.m * dims.n],
                T::zero(),
            );
        }
        let out_shape = dims.out_shape();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<Vec<usize>> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(invalid(op, format!("axis {axis} for shape {shape:?}")));
        }
        Ok(shape)
    }

    /// Softmax along `axis`, stabilised by subtracting the axis maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.check_axis(x, axis, "softmax")?;
        check_finite(self.value(x).data(), "softmax")?;
        let out = kernels::softmax_forward(self.value(x).data(), &shape, axis, false);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax(x, axis), rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.check_axis(x, axis, "log_softmax")?;
        check_finite(self.value(x).data(), "log_softmax")?;
        let out = kernels::softmax_forward(self.value(x).data(), &shape, axis, true);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LogSoftmax(x, axis), rg))
    }

    /// Weighted negative log-likelihood.
    ///
    /// `logp` is read as `[outer, C, inner]` around `axis`; `targets` holds one
    /// class per `(outer, inner)` position (`None` = ignored) and `weights` the
    /// matching weights. Returns `Σ w·(−logp[target]) / Σ w`, or 0 when every
    /// weight is zero.
    pub fn nll(
        &mut self,
        logp: Var,
        axis: usize,
        targets: &[Option<usize>],
        weights: &[T],
    ) -> Result<Var> {
        let shape = self.check_axis(logp, axis, "nll")?;
        let (outer, n, inner) = kernels::axis_split(&shape, axis);
        if targets.len() != outer * inner || weights.len() != targets.len() {
            return Err(invalid(
                "nll",
                format!(
                    "{} targets / {} weights for {} positions",
                    targets.len(),
                    weights.len(),
                    outer * inner
                ),
            ));
        }
        let lp = self.value(logp).data();
        let mut total = T::zero();
        let mut acc = T::zero();
        for (pos, (t, &w)) in targets.iter().zip(weights).enumerate() {
            let Some(c) = *t else { continue };
            if c >= n {
                return Err(invalid("nll", format!("target {c} >= {n} classes")));
            }
            if w == T::zero() {
                continue;
            }
            let (o, i) = (pos / inner, pos % inner);
            acc -= w * lp[(o * n + c) * inner + i];
            total += w;
        }
        let loss = if total > T::zero() {
            acc / total
        } else {
            T::zero()
        };
        let rg = self.any_grad(&[logp]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Nll {
                logp,
                axis,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                total,
            },
            rg,
        ))
    }

    /// 2-D convolution of `x: [B, C_in, H, W]` with `w: [C_out, C_in/groups, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let dims = self.conv_dims(x, w, b, geom)?;
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), bias, &dims);
        let mut vars = vec![x, w];
        vars.extend(b);
        let rg = self.any_grad(&vars);
        Ok(self.push(
            Tensor::new(&[dims.batch, dims.c_out, dims.h_out, dims.w_out], out)?,
            Op::Conv2d { x, w, b, geom },
            rg,
        ))
    }

    fn conv_dims(&self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<ConvDims> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        };
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(mismatch());
        }
        let (batch, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, cin_g, k) = (ws[0], ws[1], ws[2]);
        if geom.groups == 0 || c_in % geom.groups != 0 || c_out % geom.groups != 0 {
            return Err(invalid(
                "conv2d",
                format!(
                    "channels {c_in}->{c_out} not divisible by groups {}",
                    geom.groups
                ),
            ));
        }
        if cin_g != c_in / geom.groups {
            return Err(mismatch());
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![c_out],
                });
            }
        }
        let h_out = kernels::conv_out_extent(h, k, geom.stride, geom.padding)
            .ok_or_else(|| invalid("conv2d", "kernel larger than padded input"))?;
        let w_out = kernels::conv_out_extent(wd, k, geom.stride, geom.padding)
            .ok_or_else(|| invalid("conv2d", "kernel larger than padded input"))?;
        Ok(ConvDims {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            k,
            h_out,
            w_out,
            geom,
        })
    }

    /// Per-channel normalisation of `[B, C, H, W]`.
    ///
    /// With `stats = None` the batch statistics are used (training mode) and
    /// returned as `(mean, biased variance)`; otherwise the supplied
    /// `(mean, variance)` are applied as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || self.shape(gamma) != [shape[1]] || self.shape(beta) != [shape[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let (b, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        let xd = self.value(x).data();
        let count = T::of((b * plane) as f64);
        let (mean, var) = match stats {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(invalid("batch_norm", "running statistics length"));
                }
                (m.to_vec(), v.to_vec())
            }
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for bi in 0..b {
                        s += xd[(bi * c + ch) * plane..][..plane]
                            .iter()
                            .copied()
                            .sum::<T>();
                    }
                    let m = s / count;
                    let mut sq = T::zero();
                    for bi in 0..b {
                        for &v in &xd[(bi * c + ch) * plane..][..plane] {
                            sq += (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = sq / count;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                for i in off..off + plane {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gd[ch] * h + bd[ch];
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let v = self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: stats.is_none(),
            },
            rg,
        );
        Ok((v, mean, var))
    }

    /// Bilinear resize of the two trailing axes, align-corners convention.
    pub fn resize(&mut self, x: Var, h_out: usize, w_out: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2
            || h_out == 0
            || w_out == 0
            || shape[shape.len() - 1] == 0
            || shape[shape.len() - 2] == 0
        {
            return Err(invalid("resize", format!("{shape:?} -> {h_out}x{w_out}")));
        }
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let planes = numel(&shape[..r - 2]);
        let out = kernels::resize_forward(self.value(x).data(), planes, (h, w), (h_out, w_out));
        let mut out_shape = shape;
        out_shape[r - 2] = h_out;
        out_shape[r - 1] = w_out;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Resize(x), rg))
    }

    /// Non-overlapping `k × k` average pooling of the two trailing axes.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || k == 0 || shape[r - 2] % k != 0 || shape[r - 1] % k != 0 {
            return Err(invalid(
                "avg_pool",
                format!("extents {shape:?} not divisible by pool size {k}"),
            ));
        }
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let out =
            kernels::avg_pool_forward(self.value(x).data(), numel(&shape[..r - 2]), (h, w), k);
        let mut out_shape = shape;
        out_shape[r - 2] = h / k;
        out_shape[r - 1] = w / k;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::AvgPool(x, k), rg))
    }

    /// Bilinear samples of `x: [B, C, H, W]` at `coords`, returned as `[K, C]`.
    pub fn sample_points(&mut self, x: Var, coords: &[PointCoord]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(invalid(
                "sample_points",
                format!("expected [B,C,H,W], got {shape:?}"),
            ));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (max_y, max_x) = ((h - 1) as f64, (w - 1) as f64);
        for p in coords {
            if p.batch >= b {
                return Err(invalid(
                    "sample_points",
                    format!("batch {} >= {b}", p.batch),
                ));
            }
            if !(p.y >= 0.0 && p.y <= max_y && p.x >= 0.0 && p.x <= max_x) {
                return Err(TensorError::OutOfRange {
                    y: p.y,
                    x: p.x,
                    max_y,
                    max_x,
                });
            }
        }
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); coords.len() * c];
        for (k, p) in coords.iter().enumerate() {
            let taps = kernels::bilinear_taps(p.y, p.x, h, w);
            for ch in 0..c {
                let plane = &xd[(p.batch * c + ch) * h * w..][..h * w];
                let mut v = T::zero();
                for &(idx, wt) in &taps {
                    if wt != 0.0 {
                        v += T::of(wt) * plane[idx];
                    }
                }
                out[k * c + ch] = v;
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(&[coords.len(), c], out)?,
            Op::SamplePoints(x, coords.to_vec()),
            rg,
        ))
    }

    /// `base` with `src[k, :]` added at `(batch, y, x)` of `points[k]`.
    pub fn scatter_add_points(
        &mut self,
        base: Var,
        src: Var,
        points: &[(usize, usize, usize)],
    ) -> Result<Var> {
        let shape = self.shape(base).to_vec();
        if shape.len() != 4 || self.shape(src) != [points.len(), shape[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_add_points",
                lhs: shape,
                rhs: self.shape(src).to_vec(),
            });
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let mut out = self.value(base).data().to_vec();
        let sd = self.value(src).data();
        for (k, &(bi, y, x)) in points.iter().enumerate() {
            if bi >= b || y >= h || x >= w {
                return Err(invalid(
                    "scatter_add_points",
                    format!("point ({bi},{y},{x}) outside {shape:?}"),
                ));
            }
            for ch in 0..c {
                out[((bi * c + ch) * h + y) * w + x] += sd[k * c + ch];
            }
        }
        let rg = self.any_grad(&[base, src]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::ScatterAdd {
                base,
                src,
                points: points.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(invalid("permute", format!("{perm:?} for shape {shape:?}")));
        }
        let (out, out_shape) = kernels::permute(self.value(x).data(), &shape, perm);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Permute(x, perm.to_vec()),
            rg,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(invalid(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = kernels::axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Narrow { x, axis, start },
            rg,
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| invalid("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(invalid(
                "concat",
                format!("axis {axis} for shape {first:?}"),
            ));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v).data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        let rg = self.any_grad(xs);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Concat(xs.to_vec(), axis),
            rg,
        ))
    }

    /// Reverse-mode pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let emit = |v: Var, data: Vec<T>, grads: &mut [Option<Tensor<T>>]| {
            add_into(&mut grads[v.0], self.shape(v), data);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (a, b) = (*a, *b);
                let (sa, sb) = (self.shape(a), self.shape(b));
                let out_shape = node.value.shape();
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                match kind {
                    BinaryKind::Add | BinaryKind::Sub => {
                        if wants(a) {
                            emit(a, kernels::sum_to_shape(gd, out_shape, sa), grads);
                        }
                        if wants(b) {
                            let mut d = kernels::sum_to_shape(gd, out_shape, sb);
                            if *kind == BinaryKind::Sub {
                                d.iter_mut().for_each(|v| *v = -*v);
                            }
                            emit(b, d, grads);
                        }
                    }
                    BinaryKind::Mul | BinaryKind::Div => {
                        let mut da = vec![T::zero(); if wants(a) { va.len() } else { 0 }];
                        let mut db = vec![T::zero(); if wants(b) { vb.len() } else { 0 }];
                        let div = *kind == BinaryKind::Div;
                        kernels::broadcast_visit(sa, sb, out_shape, |o, ia, ib| {
                            let (x, y) = (va[ia], vb[ib]);
                            if !da.is_empty() {
                                da[ia] += if div { gd[o] / y } else { gd[o] * y };
                            }
                            if !db.is_empty() {
                                db[ib] += if div { -gd[o] * x / (y * y) } else { gd[o] * x };
                            }
                        });
                        if wants(a) {
                            emit(a, da, grads);
                        }
                        if wants(b) {
                            emit(b, db, grads);
                        }
                    }
                }
            }
            Op::Unary(kind, x) => {
                let (xv, yv) = (self.value(*x).data(), node.value.data());
                let d: Vec<T> = match kind {
                    UnaryKind::Exp => gd.iter().zip(yv).map(|(&g, &y)| g * y).collect(),
                    UnaryKind::Log => gd.iter().zip(xv).map(|(&g, &x)| g / x).collect(),
                    UnaryKind::Sigmoid => gd
                        .iter()
                        .zip(yv)
                        .map(|(&g, &y)| g * y * (T::one() - y))
                        .collect(),
                    UnaryKind::Relu => gd
                        .iter()
                        .zip(xv)
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                };
                emit(*x, d, grads);
            }
            Op::Scale(x, c) => emit(*x, gd.iter().map(|&g| g * *c).collect(), grads),
            Op::Magnitude(a, b) => {
                let (va, vb, m) = (
                    self.value(*a).data(),
                    self.value(*b).data(),
                    node.value.data(),
                );
                let ratio = |num: &[T]| -> Vec<T> {
                    gd.iter()
                        .zip(num)
                        .zip(m)
                        .map(|((&g, &n), &m)| if m > T::zero() { g * n / m } else { T::zero() })
                        .collect()
                };
                if wants(*a) {
                    emit(*a, ratio(va), grads);
                }
                if wants(*b) {
                    emit(*b, ratio(vb), grads);
                }
            }
            Op::SumAll(x) => emit(*x, vec![gd[0]; self.value(*x).numel()], grads),
            Op::SumAxis(x, axis) => {
                let (outer, n, inner) = kernels::axis_split(self.shape(*x), *axis);
                let mut d = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for k in 0..inner {
                            d[(o * n + j) * inner + k] = gd[o * inner + k];
                        }
                    }
                }
                emit(*x, d, grads);
            }
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let dims = MatMulDims::new(self.shape(*a), self.shape(*b), *trans_a, *trans_b)
                    .expect("validated in forward");
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let (m, n, k) = (dims.m, dims.n, dims.k);
                if wants(*a) {
                    let mut da = vec![T::zero(); va.len()];
                    for bi in 0..dims.batch {
                        let gm = MatRef::dense(&gd[bi * m * n..][..m * n], m, n, false);
                        let bm = dims.b_mat(vb, bi);
                        let off = if dims.a_batched { bi * m * k } else { 0 };
                        let beta = if dims.a_batched { T::zero() } else { T::one() };
                        let dst = &mut da[off..off + m * k];
                        if *trans_a {
                            // stored A is k×m: d = op(B)·dCᵀ
                            gemm(bm, transpose(gm), dst, beta);
                        } else {
                            gemm(gm, transpose(bm), dst, beta);
                        }
                    }
                    emit(*a, da, grads);
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); vb.len()];
                    for bi in 0..dims.batch {
                        let gm = MatRef::dense(&gd[bi * m * n..][..m * n], m, n, false);
                        let am = dims.a_mat(va, bi);
                        let off = if dims.b_batched { bi * k * n } else { 0 };
                        let beta = if dims.b_batched { T::zero() } else { T::one() };
                        let dst = &mut db[off..off + k * n];
                        if *trans_b {
                            // stored B is n×k: d = dCᵀ·op(A)
                            gemm(transpose(gm), am, dst, beta);
                        } else {
                            gemm(transpose(am), gm, dst, beta);
                        }
                    }
                    emit(*b, db, grads);
                }
            }
            Op::Softmax(x, axis) => {
                let y = node.value.data();
                let (outer, n, inner) = kernels::axis_split(node.value.shape(), *axis);
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + k;
                        let dot: T = (0..n).map(|j| gd[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            d[idx(j)] = y[idx(j)] * (gd[idx(j)] - dot);
                        }
                    }
                }
                emit(*x, d, grads);
            }
            Op::LogSoftmax(x, axis) => {
                let y = node.value.data();
                let (outer, n, inner) = kernels::axis_split(node.value.shape(), *axis);
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + k;
                        let gsum: T = (0..n).map(|j| gd[idx(j)]).sum();
                        for j in 0..n {
                            d[idx(j)] = gd[idx(j)] - y[idx(j)].exp() * gsum;
                        }
                    }
                }
                emit(*x, d, grads);
            }
            Op::Nll {
                logp,
                axis,
                targets,
                weights,
                total,
            } => {
                let (_, n, inner) = kernels::axis_split(self.shape(*logp), *axis);
                let mut d = vec![T::zero(); self.value(*logp).numel()];
                if *total > T::zero() {
                    for (pos, (t, &w)) in targets.iter().zip(weights).enumerate() {
                        if let Some(c) = t {
                            let (o, i) = (pos / inner, pos % inner);
                            d[(o * n + c) * inner + i] -= gd[0] * w / *total;
                        }
                    }
                }
                emit(*logp, d, grads);
            }
            Op::Conv2d { x, w, b, geom } => {
                let dims = self
                    .conv_dims(*x, *w, *b, *geom)
                    .expect("validated in forward");
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    &dims,
                    wants(*x),
                );
                if wants(*x) {
                    emit(*x, dx, grads);
                }
                if wants(*w) {
                    emit(*w, dw, grads);
                }
                if let Some(b) = b {
                    if wants(*b) {
                        emit(*b, db, grads);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = node.value.shape();
                let (bsz, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..bsz {
                    for ch in 0..c {
                        let off = (bi * c + ch) * plane;
                        for i in off..off + plane {
                            dgamma[ch] += gd[i] * xhat[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                if wants(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    let count = T::of((bsz * plane) as f64);
                    for bi in 0..bsz {
                        for ch in 0..c {
                            let off = (bi * c + ch) * plane;
                            let s = gam[ch] * inv_std[ch];
                            for i in off..off + plane {
                                dx[i] = if *train {
                                    s * (gd[i] - dbeta[ch] / count - xhat[i] * dgamma[ch] / count)
                                } else {
                                    s * gd[i]
                                };
                            }
                        }
                    }
                    emit(*x, dx, grads);
                }
                if wants(*gamma) {
                    emit(*gamma, dgamma, grads);
                }
                if wants(*beta) {
                    emit(*beta, dbeta, grads);
                }
            }
            Op::Resize(x) => {
                let s = self.shape(*x);
                let r = s.len();
                let os = node.value.shape();
                let d = kernels::resize_backward(
                    gd,
                    numel(&s[..r - 2]),
                    (s[r - 2], s[r - 1]),
                    (os[r - 2], os[r - 1]),
                );
                emit(*x, d, grads);
            }
            Op::AvgPool(x, k) => {
                let s = self.shape(*x);
                let r = s.len();
                let d =
                    kernels::avg_pool_backward(gd, numel(&s[..r - 2]), (s[r - 2], s[r - 1]), *k);
                emit(*x, d, grads);
            }
            Op::SamplePoints(x, coords) => {
                let s = self.shape(*x);
                let (c, h, w) = (s[1], s[2], s[3]);
                let mut d = vec![T::zero(); self.value(*x).numel()];
                for (k, p) in coords.iter().enumerate() {
                    for &(idx, wt) in &kernels::bilinear_taps(p.y, p.x, h, w) {
                        if wt == 0.0 {
                            continue;
                        }
                        for ch in 0..c {
                            d[(p.batch * c + ch) * h * w + idx] += T::of(wt) * gd[k * c + ch];
                        }
                    }
                }
                emit(*x, d, grads);
            }
            Op::ScatterAdd { base, src, points } => {
                if wants(*base) {
                    emit(*base, gd.to_vec(), grads);
                }
                if wants(*src) {
                    let s = node.value.shape();
                    let (c, h, w) = (s[1], s[2], s[3]);
                    let mut d = vec![T::zero(); points.len() * c];
                    for (k, &(bi, y, x)) in points.iter().enumerate() {
                        for ch in 0..c {
                            d[k * c + ch] = gd[((bi * c + ch) * h + y) * w + x];
                        }
                    }
                    emit(*src, d, grads);
                }
            }
            Op::Reshape(x) => emit(*x, gd.to_vec(), grads),
            Op::Permute(x, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (d, _) = kernels::permute(gd, node.value.shape(), &inverse);
                emit(*x, d, grads);
            }
            Op::Narrow { x, axis, start } => {
                let s = self.shape(*x);
                let (outer, n, inner) = kernels::axis_split(s, *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![T::zero(); numel(s)];
                for o in 0..outer {
                    d[(o * n + start) * inner..(o * n + start + len) * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                emit(*x, d, grads);
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = kernels::axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    if wants(v) {
                        let mut d = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            d.extend_from_slice(
                                &gd[(o * total + offset) * inner..(o * total + offset + n) * inner],
                            );
                        }
                        emit(v, d, grads);
                    }
                    offset += n;
                }
            }
        }
    }
}

fn transpose<T>(m: MatRef<'_, T>) -> MatRef<'_, T> {
    MatRef {
        data: m.data,
        rows: m.cols,
        cols: m.rows,
        rs: m.cs,
        cs: m.rs,
    }
}

/// Batch/broadcast bookkeeping for [`Graph::matmul_t`].
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    a_rows: usize,
    a_cols: usize,
    b_rows: usize,
    b_cols: usize,
    trans_a: bool,
    trans_b: bool,
    rank3: bool,
}

impl MatMulDims {
    fn new(sa: &[usize], sb: &[usize], trans_a: bool, trans_b: bool) -> Result<Self> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        let split = |s: &[usize]| -> Option<(usize, usize, usize)> {
            match s.len() {
                2 => Some((1, s[0], s[1])),
                3 => Some((s[0], s[1], s[2])),
                _ => None,
            }
        };
        let (ba, ar, ac) = split(sa).ok_or_else(mismatch)?;
        let (bb, br, bc) = split(sb).ok_or_else(mismatch)?;
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 || (ba != bb && ba != 1 && bb != 1) {
            return Err(mismatch());
        }
        let batch = ba.max(bb);
        Ok(Self {
            batch,
            m,
            k,
            n,
            a_batched: sa.len() == 3 && ba == batch,
            b_batched: sb.len() == 3 && bb == batch,
            a_rows: ar,
            a_cols: ac,
            b_rows: br,
            b_cols: bc,
            trans_a,
            trans_b,
            rank3: sa.len() == 3 || sb.len() == 3,
        })
    }

    fn a_mat<'a, T>(&self, data: &'a [T], bi: usize) -> MatRef<'a, T> {
        let size = self.a_rows * self.a_cols;
        let off = if self.a_batched { bi * size } else { 0 };
        MatRef::dense(
            &data[off..off + size],
            self.a_rows,
            self.a_cols,
            self.trans_a,
        )
    }

    fn b_mat<'a, T>(&self, data: &'a [T], bi: usize) -> MatRef<'a, T> {
        let size = self.b_rows * self.b_cols;
        let off = if self.b_batched { bi * size } else { 0 };
        MatRef::dense(
            &data[off..off + size],
            self.b_rows,
            self.b_cols,
            self.trans_b,
        )
    }

    fn out_shape(&self) -> Vec<usize> {
        if self.rank3 {
            vec![self.batch, self.m, self.n]
        } else {
            vec![self.m, self.n]
        }
    }
}
