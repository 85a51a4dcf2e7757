use super::kernels::ConvGeometry;
use super::*;
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

#[test]
fn softmax_uniform_and_single_element() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(t(&[1], &[-7.5]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[1.0]);
}

#[test]
fn softmax_closed_form_pair() {
    // exp(ln 3) / (1 + 3) = 0.75
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[0.0, 3f64.ln()]));
    let y = g.softmax(x, 0).unwrap();
    let d = g.value(y).data();
    assert!((d[0] - 0.25).abs() < 1e-15);
    assert!((d[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_rejects_non_finite() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[0.0, f64::NAN]));
    assert_eq!(
        g.softmax(x, 0),
        Err(TensorError::NonFinite { op: "softmax" })
    );
    let x = g.constant(t(&[2], &[0.0, f64::INFINITY]));
    assert!(g.softmax(x, 0).is_err());
}

#[test]
fn softmax_inner_axis() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-300.0f64..300.0, 1..40), split in 1usize..5) {
        let n = vals.len();
        let rows = if n % split == 0 { split } else { 1 };
        let mut g = Graph::new();
        let x = g.constant(t(&[rows, n / rows], &vals));
        let y = g.softmax(x, 1).unwrap();
        for r in g.value(y).data().chunks(n / rows) {
            let s: f64 = r.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(r.iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn conv_pointwise_identity() {
    let mut g = Graph::new();
    let data: Vec<f64> = (0..2 * 3 * 4).map(|i| i as f64 * 0.5 - 3.0).collect();
    let x = g.constant(t(&[1, 2, 3, 4], &data));
    let w = g.constant(t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
    let y = g.conv2d(x, w, None, ConvGeometry::default()).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn conv_all_ones_gives_nine() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, w, None, ConvGeometry::default()).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).item(), 9.0);
}

#[test]
fn conv_depthwise_delta_is_identity() {
    let mut g = Graph::new();
    let data: Vec<f64> = (0..3 * 5 * 5).map(|i| ((i * 7) % 11) as f64).collect();
    let x = g.constant(t(&[1, 3, 5, 5], &data));
    let mut k = vec![0.0; 3 * 9];
    for c in 0..3 {
        k[c * 9 + 4] = 1.0;
    }
    let w = g.constant(t(&[3, 1, 3, 3], &k));
    let geom = ConvGeometry {
        stride: 1,
        padding: 1,
        groups: 3,
    };
    let y = g.conv2d(x, w, None, geom).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn conv_stride_and_padding_extents() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2, 3, 64, 48]));
    let w = g.constant(Tensor::zeros(&[8, 3, 3, 3]));
    let geom = ConvGeometry {
        stride: 2,
        padding: 1,
        groups: 1,
    };
    let y = g.conv2d(x, w, None, geom).unwrap();
    assert_eq!(g.shape(y), &[2, 8, 32, 24]);
}

#[test]
fn conv_rejects_bad_groups_and_shapes() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let w = g.constant(Tensor::zeros(&[4, 1, 3, 3]));
    let geom = ConvGeometry {
        stride: 1,
        padding: 1,
        groups: 2,
    };
    assert!(g.conv2d(x, w, None, geom).is_err());
    let w = g.constant(Tensor::zeros(&[4, 2, 3, 3]));
    assert!(g.conv2d(x, w, None, ConvGeometry::default()).is_err());
}

#[test]
fn conv_matches_direct_sum() {
    // brute-force correlation with zero padding
    let (cin, cout, h, w, k, s, p) = (2, 3, 5, 6, 3, 2, 1);
    let xs: Vec<f64> = (0..cin * h * w)
        .map(|i| ((i * 13) % 17) as f64 / 7.0 - 1.0)
        .collect();
    let ws: Vec<f64> = (0..cout * cin * k * k)
        .map(|i| ((i * 5) % 9) as f64 / 4.0 - 1.0)
        .collect();
    let bs = [0.5, -0.25, 1.0];
    let mut g = Graph::new();
    let x = g.constant(t(&[1, cin, h, w], &xs));
    let wt = g.constant(t(&[cout, cin, k, k], &ws));
    let b = g.constant(t(&[cout], &bs));
    let geom = ConvGeometry {
        stride: s,
        padding: p,
        groups: 1,
    };
    let y = g.conv2d(x, wt, Some(b), geom).unwrap();
    let (ho, wo) = (3, 3);
    assert_eq!(g.shape(y), &[1, cout, ho, wo]);
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = bs[co];
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * s + ky) as isize - p as isize;
                            let ix = (ox * s + kx) as isize - p as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += ws[((co * cin + ci) * k + ky) * k + kx]
                                    * xs[(ci * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
                let got = g.value(y).get(&[0, co, oy, ox]);
                assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
            }
        }
    }
}

#[test]
fn resize_identity_is_bitwise() {
    let data: Vec<f64> = (0..2 * 3 * 5).map(|i| (i as f64).sin() * 1e3).collect();
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 3, 5], &data));
    let y = g.resize(x, 3, 5).unwrap();
    assert_eq!(g.value(y).data(), &data[..]);
}

#[test]
fn resize_constant_source() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 1, 1], &[0.3, -2.0]));
    let y = g.resize(x, 4, 7).unwrap();
    let d = g.value(y).data();
    assert!(d[..28].iter().all(|&v| v == 0.3));
    assert!(d[28..].iter().all(|&v| v == -2.0));
}

#[test]
fn resize_align_corners_row() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2], &[0.0, 1.0]));
    let y = g.resize(x, 1, 3).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.5, 1.0]);
    assert!(g.resize(x, 0, 3).is_err());
}

#[test]
fn sample_points_exact_and_midpoint() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 2, 3], &[0.0, 2.0, 5.0, -1.0, 4.0, 9.0]));
    let pts = [
        PointCoord {
            batch: 0,
            y: 1.0,
            x: 2.0,
        },
        PointCoord {
            batch: 0,
            y: 0.0,
            x: 0.5,
        },
        PointCoord {
            batch: 0,
            y: 0.0,
            x: 0.0,
        },
    ];
    let y = g.sample_points(x, &pts).unwrap();
    assert_eq!(g.shape(y), &[3, 1]);
    assert_eq!(g.value(y).data(), &[9.0, 1.0, 0.0]);
}

#[test]
fn sample_points_bilinear_formula() {
    let patch = [0.7, -1.3, 2.9, 0.4];
    let (py, px) = (0.37, 0.81);
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 2, 2], &patch));
    let y = g
        .sample_points(
            x,
            &[PointCoord {
                batch: 0,
                y: py,
                x: px,
            }],
        )
        .unwrap();
    let expect = patch[0] * (1.0 - py) * (1.0 - px)
        + patch[1] * (1.0 - py) * px
        + patch[2] * py * (1.0 - px)
        + patch[3] * py * px;
    assert!((g.value(y).item() - expect).abs() < 1e-15);
}

#[test]
fn sample_points_out_of_range() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let err = g.sample_points(
        x,
        &[PointCoord {
            batch: 0,
            y: 1.5,
            x: 0.0,
        }],
    );
    assert!(matches!(err, Err(TensorError::OutOfRange { .. })));
    assert!(g
        .sample_points(
            x,
            &[PointCoord {
                batch: 0,
                y: 0.0,
                x: -0.1
            }]
        )
        .is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.input(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
    let l = g.sum(x);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
}

#[test]
fn backward_of_square_is_twice_x() {
    let vals = [1.0, -2.0, 3.0, 0.5];
    let mut g = Graph::new();
    let x = g.input(t(&[4], &vals));
    let sq = g.mul(x, x).unwrap();
    let l = g.sum(sq);
    let grads = g.backward(l).unwrap();
    let expect: Vec<f64> = vals.iter().map(|v| 2.0 * v).collect();
    assert_eq!(grads.get(x).unwrap().data(), &expect[..]);
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = g.input(t(&[2], &[1.0, 2.0]));
    assert!(g.backward(x).is_err());
}

#[test]
fn detached_branch_gets_no_gradient() {
    let mut g = Graph::new();
    let x = g.input(t(&[2], &[1.0, 2.0]));
    let d = g.detach(x);
    let y = g.mul(d, d).unwrap();
    let z = g.add(y, x).unwrap();
    let l = g.sum(z);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0]);
    assert!(grads.get(d).is_none());
}

#[test]
fn repeated_backward_accumulates_in_store() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", t(&[2], &[1.0, 3.0]), true);
    for _ in 0..2 {
        let grads = {
            let mut s = Session::new(&store, Mode::Train);
            let w = s.param(id);
            let sq = s.graph.mul(w, w).unwrap();
            let l = s.graph.sum(sq);
            s.param_grads(l).unwrap()
        };
        store.accumulate(&grads);
    }
    assert_eq!(store.grad(id).data(), &[4.0, 12.0]);
    store.zero_grads();
    assert_eq!(store.grad(id).data(), &[0.0, 0.0]);
}

#[test]
fn broadcasting_mul_and_reduction_grads() {
    let mut g = Graph::new();
    let a = g.input(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let b = g.input(t(&[3], &[1.0, 10.0, 100.0]));
    let y = g.mul(a, b).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 20.0, 300.0, 4.0, 50.0, 600.0]);
    let l = g.sum(y);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(b).unwrap().data(), &[5.0, 7.0, 9.0]);
    assert_eq!(
        grads.get(a).unwrap().data(),
        &[1.0, 10.0, 100.0, 1.0, 10.0, 100.0]
    );
}

#[test]
fn batched_matmul_with_shared_operand() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = g.constant(t(&[2, 2], &[1.0, 0.0, 1.0, 1.0]));
    let y = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(y), &[2, 1, 2]);
    assert_eq!(g.value(y).data(), &[3.0, 2.0, 7.0, 4.0]);
    let yt = g.matmul_t(b, a, false, true).unwrap();
    assert_eq!(g.shape(yt), &[2, 2, 1]);
    assert_eq!(g.value(yt).data(), &[1.0, 3.0, 3.0, 7.0]);
}

#[test]
fn nll_all_ignored_is_zero() {
    let mut g = Graph::new();
    let x = g.input(t(&[1, 2, 2], &[0.0, 1.0, 2.0, 3.0]));
    let lp = g.log_softmax(x, 1).unwrap();
    let l = g.nll(lp, 1, &[None, None], &[1.0, 1.0]).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let grads = g.backward(l).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn narrow_concat_permute_roundtrip() {
    let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
    let mut g = Graph::new();
    let x = g.input(t(&[2, 3, 4], &data));
    let a = g.narrow(x, 1, 0, 1).unwrap();
    let b = g.narrow(x, 1, 1, 2).unwrap();
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.value(c), g.value(x));
    let p = g.permute(c, &[2, 0, 1]).unwrap();
    assert_eq!(g.shape(p), &[4, 2, 3]);
    let q = g.permute(p, &[1, 2, 0]).unwrap();
    assert_eq!(g.value(q), g.value(x));
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..2 * 4 * 6 * 6)
            .map(|i| ((i * 31) % 23) as f64 / 9.0)
            .collect();
        let x = g.constant(t(&[2, 4, 6, 6], &data));
        let wd: Vec<f64> = (0..8 * 4 * 9)
            .map(|i| ((i * 17) % 13) as f64 / 13.0 - 0.5)
            .collect();
        let w = g.constant(t(&[8, 4, 3, 3], &wd));
        let geom = ConvGeometry {
            stride: 2,
            padding: 1,
            groups: 1,
        };
        let y = g.conv2d(x, w, None, geom).unwrap();
        let z = g.resize(y, 7, 5).unwrap();
        let s = g.softmax(z, 1).unwrap();
        g.value(s).clone()
    };
    assert_eq!(run(), run());
}
