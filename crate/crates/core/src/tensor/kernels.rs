//! Raw numeric kernels behind the graph operations.
//!
//! Everything here works on flat row-major slices. The graph layer owns shape
//! validation; these functions assume consistent arguments.

use super::{gemm, MatRef, Real};

/// Stride, zero padding and channel grouping of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

pub fn conv_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    if stride == 0 {
        return None;
    }
    (input + 2 * padding)
        .checked_sub(kernel)
        .map(|span| span / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub geom: ConvGeometry,
}

impl ConvDims {
    fn cin_g(&self) -> usize {
        self.c_in / self.geom.groups
    }
    fn cout_g(&self) -> usize {
        self.c_out / self.geom.groups
    }
    fn patch(&self) -> usize {
        self.cin_g() * self.k * self.k
    }
    fn pixels_out(&self) -> usize {
        self.h_out * self.w_out
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.geom.stride == 1 && self.geom.padding == 0
    }
}

fn im2col<T: Real>(x: &[T], d: &ConvDims, col: &mut [T]) {
    let (h, w, k, s, p) = (d.h, d.w, d.k, d.geom.stride, d.geom.padding);
    let (ho, wo) = (d.h_out, d.w_out);
    let plane = ho * wo;
    for c in 0..d.cin_g() {
        let src = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(col: &[T], d: &ConvDims, dx: &mut [T]) {
    let (h, w, k, s, p) = (d.h, d.w, d.k, d.geom.stride, d.geom.padding);
    let (ho, wo) = (d.h_out, d.w_out);
    let plane = ho * wo;
    for c in 0..d.cin_g() {
        let dst = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
) -> Vec<T> {
    let (cin_g, cout_g, patch, plane) = (d.cin_g(), d.cout_g(), d.patch(), d.pixels_out());
    let mut out = vec![T::zero(); d.batch * d.c_out * plane];
    let mut col = if d.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * plane]
    };
    for b in 0..d.batch {
        for g in 0..d.geom.groups {
            let xs = &x[(b * d.c_in + g * cin_g) * d.h * d.w..][..cin_g * d.h * d.w];
            let wg = MatRef::dense(
                &weight[g * cout_g * patch..][..cout_g * patch],
                cout_g,
                patch,
                false,
            );
            let o = &mut out[(b * d.c_out + g * cout_g) * plane..][..cout_g * plane];
            if d.is_pointwise() {
                gemm(wg, MatRef::dense(xs, cin_g, plane, false), o, T::zero());
            } else {
                im2col(xs, d, &mut col);
                gemm(wg, MatRef::dense(&col, patch, plane, false), o, T::zero());
            }
        }
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                for v in &mut out[(b * d.c_out + co) * plane..][..plane] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Returns (d input, d weight, d bias).
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    weight: &[T],
    gy: &[T],
    d: &ConvDims,
    need_dx: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (cin_g, cout_g, patch, plane) = (d.cin_g(), d.cout_g(), d.patch(), d.pixels_out());
    let mut dx = if need_dx {
        vec![T::zero(); x.len()]
    } else {
        Vec::new()
    };
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); d.c_out];
    let pointwise = d.is_pointwise();
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); patch * plane]
    };
    let mut dcol = if pointwise || !need_dx {
        Vec::new()
    } else {
        vec![T::zero(); patch * plane]
    };
    for b in 0..d.batch {
        for co in 0..d.c_out {
            db[co] += gy[(b * d.c_out + co) * plane..][..plane]
                .iter()
                .copied()
                .sum::<T>();
        }
        for g in 0..d.geom.groups {
            let x_off = (b * d.c_in + g * cin_g) * d.h * d.w;
            let xs = &x[x_off..][..cin_g * d.h * d.w];
            let gyg = &gy[(b * d.c_out + g * cout_g) * plane..][..cout_g * plane];
            let gy_m = MatRef::dense(gyg, cout_g, plane, false);
            let wg_data = &weight[g * cout_g * patch..][..cout_g * patch];
            let dwg = &mut dw[g * cout_g * patch..][..cout_g * patch];
            if pointwise {
                gemm(gy_m, MatRef::dense(xs, cin_g, plane, true), dwg, T::one());
                if need_dx {
                    let wt = MatRef::dense(wg_data, cout_g, patch, true);
                    gemm(wt, gy_m, &mut dx[x_off..][..cin_g * plane], T::zero());
                }
            } else {
                im2col(xs, d, &mut col);
                gemm(gy_m, MatRef::dense(&col, patch, plane, true), dwg, T::one());
                if need_dx {
                    let wt = MatRef::dense(wg_data, cout_g, patch, true);
                    gemm(wt, gy_m, &mut dcol, T::zero());
                    col2im_add(&dcol, d, &mut dx[x_off..][..cin_g * d.h * d.w]);
                }
            }
        }
    }
    (dx, dw, db)
}

/// Source index pair and interpolation fraction for each output position of
/// an align-corners resize along one axis.
pub(crate) fn resize_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let pos = if dst == 1 || src == 1 {
                0.0
            } else {
                (i * (src - 1)) as f64 / (dst - 1) as f64
            };
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

pub(crate) fn resize_forward<T: Real>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
) -> Vec<T> {
    if (h, w) == (ho, wo) {
        return x.to_vec();
    }
    let ys = resize_axis(h, ho);
    let xs = resize_axis(w, wo);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let (fy, gy) = (T::of(fy), T::of(1.0 - fy));
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let (fx, gx) = (T::of(fx), T::of(1.0 - fx));
                let top = gx * src[y0 * w + x0] + fx * src[y0 * w + x1];
                let bot = gx * src[y1 * w + x0] + fx * src[y1 * w + x1];
                dst[oy * wo + ox] = gy * top + fy * bot;
            }
        }
    }
    out
}

pub(crate) fn resize_backward<T: Real>(
    gy_out: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
) -> Vec<T> {
    if (h, w) == (ho, wo) {
        return gy_out.to_vec();
    }
    let ys = resize_axis(h, ho);
    let xs = resize_axis(w, wo);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let g = &gy_out[p * ho * wo..(p + 1) * ho * wo];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let (fy, gyw) = (T::of(fy), T::of(1.0 - fy));
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let (fx, gxw) = (T::of(fx), T::of(1.0 - fx));
                let v = g[oy * wo + ox];
                d[y0 * w + x0] += gyw * gxw * v;
                d[y0 * w + x1] += gyw * fx * v;
                d[y1 * w + x0] += fy * gxw * v;
                d[y1 * w + x1] += fy * fx * v;
            }
        }
    }
    dx
}

pub(crate) fn avg_pool_forward<T: Real>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    k: usize,
) -> Vec<T> {
    let (ho, wo) = (h / k, w / k);
    let scale = T::of(1.0 / (k * k) as f64);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        for y in 0..h {
            for x_ in 0..w {
                out[(p * ho + y / k) * wo + x_ / k] += x[(p * h + y) * w + x_];
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

pub(crate) fn avg_pool_backward<T: Real>(
    g: &[T],
    planes: usize,
    (h, w): (usize, usize),
    k: usize,
) -> Vec<T> {
    let (ho, wo) = (h / k, w / k);
    let scale = T::of(1.0 / (k * k) as f64);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..h {
            for x_ in 0..w {
                dx[(p * h + y) * w + x_] = g[(p * ho + y / k) * wo + x_ / k] * scale;
            }
        }
    }
    dx
}

/// Corner indices and weights for bilinear sampling at a continuous point.
pub(crate) fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let y0 = (y.floor() as usize).min(h - 1);
    let x0 = (x.floor() as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    [
        (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
        (y0 * w + x1, (1.0 - fy) * fx),
        (y1 * w + x0, fy * (1.0 - fx)),
        (y1 * w + x1, fy * fx),
    ]
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward<T: Real>(x: &[T], shape: &[usize], axis: usize, log: bool) -> Vec<T> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..n {
                max = max.max(x[idx(j)]);
            }
            let mut z = T::zero();
            for j in 0..n {
                z += (x[idx(j)] - max).exp();
            }
            if log {
                let lz = z.ln();
                for j in 0..n {
                    out[idx(j)] = x[idx(j)] - max - lz;
                }
            } else {
                for j in 0..n {
                    out[idx(j)] = (x[idx(j)] - max).exp() / z;
                }
            }
        }
    }
    out
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` when broadcast into `out` (zero on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every position of `out`, handing the matching offsets of `a` and `b`.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let last = rank - 1;
    let mut lin = 0;
    loop {
        for j in 0..out[last] {
            f(lin + j, oa + j * sa[last], ob + j * sb[last]);
        }
        lin += out[last];
        // advance odometer over the leading axes
        let mut ax = last;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * idx[ax];
            ob -= sb[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn broadcast_binary<T: Real>(
    a: &[T],
    ashape: &[usize],
    b: &[T],
    bshape: &[usize],
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    if ashape == bshape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let mut out = vec![T::zero(); out_shape.iter().product()];
    let sa = broadcast_strides(ashape, out_shape);
    let sb = broadcast_strides(bshape, out_shape);
    for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| out[o] = f(a[ia], b[ib]));
    out
}

/// Reduces a gradient of broadcast shape `gshape` back onto `target` by summation.
pub(crate) fn sum_to_shape<T: Real>(g: &[T], gshape: &[usize], target: &[usize]) -> Vec<T> {
    if gshape == target {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); target.iter().product()];
    let st = broadcast_strides(target, gshape);
    let zero = vec![0; gshape.len()];
    for_each_broadcast(gshape, &st, &zero, |o, it, _| out[it] += g[o]);
    out
}

/// Applies `f(out_offset, a_offset, b_offset)` across a broadcast pair; used by
/// backward rules that need both operands.
pub(crate) fn broadcast_visit(
    ashape: &[usize],
    bshape: &[usize],
    out_shape: &[usize],
    f: impl FnMut(usize, usize, usize),
) {
    let sa = broadcast_strides(ashape, out_shape);
    let sb = broadcast_strides(bshape, out_shape);
    for_each_broadcast(out_shape, &sa, &sb, f);
}

pub(crate) fn permute<T: Real>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zero = vec![0; rank];
    let mut out = vec![T::zero(); x.len()];
    for_each_broadcast(&out_shape, &strides, &zero, |o, i, _| out[o] = x[i]);
    (out, out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_axis_align_corners_endpoints() {
        let t = resize_axis(2, 3);
        assert_eq!(t[0], (0, 1, 0.0));
        assert_eq!(t[1], (0, 1, 0.5));
        assert_eq!(t[2].0 as f64 + t[2].2, 1.0);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[4]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }

    #[test]
    fn sum_to_shape_reduces_broadcast_axes() {
        let g = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(sum_to_shape(&g, &[2, 3], &[3]), vec![5.0, 7.0, 9.0]);
        assert_eq!(sum_to_shape(&g, &[2, 3], &[2, 1]), vec![6.0, 15.0]);
        assert_eq!(sum_to_shape(&g, &[2, 3], &[]), vec![21.0]);
    }

    #[test]
    fn permute_transposes() {
        let x = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let (y, s) = permute(&x, &[2, 3], &[1, 0]);
        assert_eq!(s, vec![3, 2]);
        assert_eq!(y, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn conv_extent_arithmetic() {
        assert_eq!(conv_out_extent(64, 3, 2, 1), Some(32));
        assert_eq!(conv_out_extent(3, 3, 1, 0), Some(1));
        assert_eq!(conv_out_extent(2, 3, 1, 0), None);
    }
}
