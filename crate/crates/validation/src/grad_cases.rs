//! One finite-difference check per differentiable operation.

use cstr_core::bgc::{build_buffer, edge_path, grid_path, sobel_magnitude};
use cstr_core::encoder::Encoder;
use cstr_core::gcs::{cross_scale_attention, fuse, gate, CoarseHead};
use cstr_core::gltr::{aggregate, class_attention, local_refine, scale_weights};
use cstr_core::loss::{
    band_regularizer, cross_entropy, total_loss, LossConfig, LossInputs, IGNORE_INDEX,
};
use cstr_core::model::{images_to_tensor, CstrModel, ModelConfig};
use cstr_core::point::{PointHead, PointSet};
use cstr_core::tensor::kernels::ConvGeometry;
use cstr_core::tensor::{Mode, ParamStore, PointCoord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fd::{check, store_of, uniform, FdReport, POINTS};

pub type Case = (&'static str, fn() -> FdReport);

const U: (f64, f64) = (-1.0, 1.0);

fn randomise(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for e in store.iter_mut().filter(|e| e.trainable) {
        e.value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
}

fn elementwise() -> FdReport {
    let (store, ids) = store_of(1, &[("a", &[4, 5, 6], -1.0, 1.0), ("b", &[5, 6], 0.5, 1.5)]);
    check(store, Mode::Eval, 1, POINTS, |s| {
        let (a, b) = (s.param(ids[0]), s.param(ids[1]));
        let sum = s.graph.add(a, b)?;
        let diff = s.graph.sub(a, b)?;
        let prod = s.graph.mul(sum, diff)?;
        let q = s.graph.div(prod, b)?;
        let e = s.graph.exp(a);
        let l = s.graph.log(b);
        let sg = s.graph.sigmoid(q);
        let r = s.graph.relu(a);
        let x = s.graph.add(e, l)?;
        let x = s.graph.add(x, sg)?;
        let x = s.graph.add(x, r)?;
        Ok(s.graph.scale(x, 0.7))
    })
}

fn magnitude() -> FdReport {
    let (store, ids) = store_of(
        2,
        &[
            ("a", &[2, 3, 4, 5], 0.2, 1.0),
            ("b", &[2, 3, 4, 5], -1.0, -0.2),
        ],
    );
    check(store, Mode::Eval, 2, POINTS, |s| {
        let (a, b) = (s.param(ids[0]), s.param(ids[1]));
        s.graph.magnitude(a, b)
    })
}

fn reductions() -> FdReport {
    let (store, ids) = store_of(3, &[("x", &[3, 4, 5, 2], -1.0, 1.0)]);
    check(store, Mode::Eval, 3, POINTS, |s| {
        let x = s.param(ids[0]);
        let a = s.graph.sum_axis(x, 1)?;
        let b = s.graph.mean_axes(x, &[2, 3])?;
        let sq = s.graph.mul(x, x)?;
        let t = s.graph.sum(sq);
        let m = s.graph.mean(x);
        let ab = s.graph.mul(a, b)?;
        let tm = s.graph.mul(t, m)?;
        s.graph.add(ab, tm)
    })
}

fn matmul() -> FdReport {
    let (store, ids) = store_of(
        4,
        &[
            ("a", &[2, 5, 6], -1.0, 1.0),
            ("b", &[6, 4], -1.0, 1.0),
            ("c", &[2, 4, 5], -1.0, 1.0),
        ],
    );
    check(store, Mode::Eval, 4, POINTS, |s| {
        let (a, b, c) = (s.param(ids[0]), s.param(ids[1]), s.param(ids[2]));
        let ab = s.graph.matmul(a, b)?;
        let x = s.graph.matmul_t(ab, c, false, false)?;
        let y = s.graph.matmul_t(c, ab, true, true)?;
        let yt = s.graph.permute(y, &[0, 2, 1])?;
        s.graph.add(x, yt)
    })
}

fn softmax() -> FdReport {
    let (store, ids) = store_of(5, &[("x", &[2, 6, 3, 4], -3.0, 3.0)]);
    check(store, Mode::Eval, 5, POINTS, |s| {
        let x = s.param(ids[0]);
        let a = s.graph.softmax(x, 1)?;
        let b = s.graph.log_softmax(x, 3)?;
        s.graph.add(a, b)
    })
}

fn nll() -> FdReport {
    let (store, ids) = store_of(6, &[("x", &[2, 6, 10], -2.0, 2.0)]);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let targets: Vec<Option<usize>> = (0..20)
        .map(|i| (i % 7 != 3).then(|| rng.gen_range(0..6)))
        .collect();
    let weights: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..2.0)).collect();
    check(store, Mode::Eval, 6, POINTS, move |s| {
        let x = s.param(ids[0]);
        let lp = s.graph.log_softmax(x, 1)?;
        s.graph.nll(lp, 1, &targets, &weights)
    })
}

fn conv(geom: ConvGeometry, cin: usize, cout: usize, k: usize, bias: bool, seed: u64) -> FdReport {
    let wshape = [cout, cin / geom.groups, k, k];
    let bshape = [cout];
    let mut specs: Vec<(&str, &[usize], f64, f64)> =
        vec![("x", &[2, 4, 7, 6], U.0, U.1), ("w", &wshape, U.0, U.1)];
    if bias {
        specs.push(("b", &bshape, U.0, U.1));
    }
    assert_eq!(cin, 4);
    let (store, ids) = store_of(seed, &specs);
    check(store, Mode::Eval, seed, POINTS, move |s| {
        let x = s.param(ids[0]);
        let w = s.param(ids[1]);
        let b = ids.get(2).map(|&id| s.param(id));
        s.graph.conv2d(x, w, b, geom)
    })
}

fn conv_dense() -> FdReport {
    conv(
        ConvGeometry {
            stride: 1,
            padding: 1,
            groups: 1,
        },
        4,
        3,
        3,
        true,
        7,
    )
}

fn conv_strided() -> FdReport {
    conv(
        ConvGeometry {
            stride: 2,
            padding: 1,
            groups: 1,
        },
        4,
        5,
        3,
        false,
        8,
    )
}

fn conv_depthwise() -> FdReport {
    conv(
        ConvGeometry {
            stride: 1,
            padding: 1,
            groups: 4,
        },
        4,
        4,
        3,
        false,
        9,
    )
}

fn conv_pointwise() -> FdReport {
    conv(ConvGeometry::default(), 4, 6, 1, true, 10)
}

fn batch_norm() -> FdReport {
    let (store, ids) = store_of(
        11,
        &[
            ("x", &[3, 4, 3, 3], -2.0, 2.0),
            ("g", &[4], 0.5, 1.5),
            ("b", &[4], U.0, U.1),
        ],
    );
    check(store, Mode::Eval, 11, POINTS, |s| {
        let (x, g, b) = (s.param(ids[0]), s.param(ids[1]), s.param(ids[2]));
        let (batch, _, _) = s.graph.batch_norm(x, g, b, None, 1e-5)?;
        let (fixed, _, _) = s.graph.batch_norm(
            x,
            g,
            b,
            Some((&[0.1, -0.2, 0.0, 0.3], &[1.0, 0.5, 2.0, 0.8])),
            1e-5,
        )?;
        let sq = s.graph.mul(batch, batch)?;
        s.graph.add(sq, fixed)
    })
}

fn resample() -> FdReport {
    let (store, ids) = store_of(12, &[("x", &[2, 3, 6, 8], U.0, U.1)]);
    check(store, Mode::Eval, 12, POINTS, |s| {
        let x = s.param(ids[0]);
        let up = s.graph.resize(x, 11, 13)?;
        let down = s.graph.resize(up, 6, 8)?;
        let pooled = s.graph.avg_pool(down, 2)?;
        let back = s.graph.resize(pooled, 6, 8)?;
        let y = s.graph.mul(back, x)?;
        s.graph.add(y, down)
    })
}

fn points() -> FdReport {
    let (store, ids) = store_of(
        13,
        &[("x", &[2, 3, 5, 6], U.0, U.1), ("src", &[4, 3], U.0, U.1)],
    );
    let coords = vec![
        PointCoord {
            batch: 0,
            y: 0.3,
            x: 4.7,
        },
        PointCoord {
            batch: 1,
            y: 3.5,
            x: 0.0,
        },
        PointCoord {
            batch: 1,
            y: 4.0,
            x: 5.0,
        },
        PointCoord {
            batch: 0,
            y: 2.25,
            x: 2.75,
        },
    ];
    let spots = vec![(0, 1, 2), (1, 4, 5), (1, 0, 0), (0, 1, 3)];
    check(store, Mode::Eval, 13, POINTS, move |s| {
        let (x, src) = (s.param(ids[0]), s.param(ids[1]));
        let scattered = s.graph.scatter_add_points(x, src, &spots)?;
        let sq = s.graph.mul(scattered, scattered)?;
        let sampled = s.graph.sample_points(sq, &coords)?;
        let flat = s.graph.reshape(sampled, &[12])?;
        let whole = s.graph.reshape(sq, &[180])?;
        let head = s.graph.narrow(whole, 0, 30, 50)?;
        s.graph.concat(&[flat, head], 0)
    })
}

fn class_attention_t1() -> FdReport {
    let (store, ids) = store_of(
        14,
        &[
            ("tokens", &[2, 6, 5], U.0, U.1),
            ("q", &[3, 4], -2.0, 2.0),
            ("wk", &[5, 4], U.0, U.1),
            ("wv", &[5, 5], U.0, U.1),
        ],
    );
    check(store, Mode::Eval, 14, POINTS, |s| {
        let v: Vec<_> = ids.iter().map(|&i| s.param(i)).collect();
        let a = class_attention(s, v[0], v[1], v[2], v[3])?;
        let t = s.graph.reshape(a.t1, &[60])?;
        let la = s.graph.reshape(a.log_attn, &[36])?;
        s.graph.concat(&[t, la], 0)
    })
}

fn local_refinement() -> FdReport {
    let (store, ids) = store_of(
        15,
        &[
            ("x", &[2, 4, 4, 4], U.0, U.1),
            ("dw", &[4, 1, 3, 3], U.0, U.1),
            ("pw", &[4, 4, 1, 1], U.0, U.1),
        ],
    );
    check(store, Mode::Eval, 15, POINTS, |s| {
        let v: Vec<_> = ids.iter().map(|&i| s.param(i)).collect();
        local_refine(s, v[0], v[1], v[2])
    })
}

fn scale_aggregation() -> FdReport {
    let (store, ids) = store_of(
        16,
        &[
            ("p0", &[2, 3], U.0, U.1),
            ("p1", &[2, 4], U.0, U.1),
            ("w0", &[3], U.0, U.1),
            ("w1", &[4], U.0, U.1),
            ("f0", &[2, 5, 4, 4], U.0, U.1),
            ("f1", &[2, 5, 4, 4], U.0, U.1),
        ],
    );
    check(store, Mode::Eval, 16, POINTS, |s| {
        let v: Vec<_> = ids.iter().map(|&i| s.param(i)).collect();
        let weights = scale_weights(s, &[v[0], v[1]], &[v[2], v[3]])?;
        aggregate(s, &[v[4], v[5]], weights)
    })
}

fn structural_paths() -> FdReport {
    let (store, ids) = store_of(
        17,
        &[
            ("fine", &[1, 3, 8, 8], U.0, U.1),
            ("we", &[2, 3, 1, 1], U.0, U.1),
            ("wg", &[2, 3, 1, 1], U.0, U.1),
        ],
    );
    check(store, Mode::Eval, 17, POINTS, |s| {
        let v: Vec<_> = ids.iter().map(|&i| s.param(i)).collect();
        let sob = sobel_magnitude(s, v[0])?;
        let e = edge_path(s, v[0], v[1])?;
        let g = grid_path(s, v[0], v[2], 2)?;
        let eg = s.graph.concat(&[e, g], 1)?;
        let sob = s.graph.reshape(sob, &[192])?;
        let eg = s.graph.reshape(eg, &[256])?;
        s.graph.concat(&[sob, eg], 0)
    })
}

fn cross_scale() -> FdReport {
    let (store, ids) = store_of(
        18,
        &[
            ("edge", &[2, 2, 3, 3], U.0, U.1),
            ("grid", &[2, 2, 3, 3], U.0, U.1),
            ("wk", &[4, 3], U.0, U.1),
            ("wv", &[4, 5], U.0, U.1),
            ("wt", &[4, 5], U.0, U.1),
            ("q", &[2, 4, 3], -2.0, 2.0),
        ],
    );
    check(store, Mode::Eval, 18, POINTS, |s| {
        let v: Vec<_> = ids.iter().map(|&i| s.param(i)).collect();
        let buf = build_buffer(s, v[0], v[1], v[2], v[3], Some(v[4]))?;
        let cs = cross_scale_attention(s, v[5], &buf)?;
        s.graph.concat(&[cs.f_cs, cs.tb.unwrap()], 2)
    })
}

fn gating() -> FdReport {
    let (store, ids) = store_of(
        19,
        &[
            ("t2", &[2, 3, 4], U.0, U.1),
            ("f", &[2, 3, 4], U.0, U.1),
            ("tb", &[2, 3, 4], U.0, U.1),
            ("t0", &[2, 3, 4], U.0, U.1),
            ("wt", &[4, 4], U.0, U.1),
            ("ws", &[4, 4], U.0, U.1),
            ("wb", &[4, 4], U.0, U.1),
            ("w0", &[4, 4], U.0, U.1),
            ("bias", &[4], U.0, U.1),
        ],
    );
    check(store, Mode::Eval, 19, POINTS, |s| {
        let v: Vec<_> = ids.iter().map(|&i| s.param(i)).collect();
        gate(
            s,
            &[(v[0], v[4]), (v[1], v[5]), (v[2], v[6]), (v[3], v[7])],
            Some(v[8]),
        )
    })
}

fn fusion() -> FdReport {
    let (store, ids) = store_of(
        20,
        &[
            ("t2", &[2, 5, 4], U.0, U.1),
            ("f", &[2, 5, 4], U.0, U.1),
            ("pre", &[2, 5, 4], -3.0, 3.0),
        ],
    );
    check(store, Mode::Eval, 20, POINTS, |s| {
        let v: Vec<_> = ids.iter().map(|&i| s.param(i)).collect();
        let g = s.graph.sigmoid(v[2]);
        let gated = fuse(s, v[0], v[1], Some(g))?;
        let plain = fuse(s, v[0], v[1], None)?;
        s.graph.concat(&[gated, plain], 2)
    })
}

fn coarse_head() -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    let x = store.add("lattice", uniform(&mut rng, &[2, 4, 3, 3], -1.0, 1.0), true);
    let head = CoarseHead::new(&mut store, &mut rng, 4, 6);
    randomise(&mut store, 21);
    check(store, Mode::Eval, 21, POINTS, move |s| {
        let l = s.param(x);
        head.forward(s, l, 8, 7)
    })
}

fn point_mlp() -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut store = ParamStore::new();
    let logits = store.add("logits", uniform(&mut rng, &[2, 6, 8, 8], -1.0, 1.0), true);
    let lattice = store.add("lattice", uniform(&mut rng, &[2, 4, 2, 2], -1.0, 1.0), true);
    let fine = store.add("fine", uniform(&mut rng, &[2, 3, 4, 4], -1.0, 1.0), true);
    let head = PointHead::new(&mut store, &mut rng, 7, &[8, 8], 6, 0.05);
    randomise(&mut store, 22);
    let sets = vec![
        PointSet {
            indices: vec![(0, 0), (3, 5), (7, 7)],
            margins: vec![0.0; 3],
        },
        PointSet {
            indices: vec![(2, 1), (6, 4)],
            margins: vec![0.0; 2],
        },
    ];
    check(store, Mode::Eval, 22, POINTS, move |s| {
        let (lg, la, fi) = (s.param(logits), s.param(lattice), s.param(fine));
        let out = head.refine(s, sets.clone(), lg, la, fi)?;
        let pl = s.graph.reshape(out.point_logits.unwrap(), &[30])?;
        let r = s.graph.reshape(out.refined, &[768])?;
        s.graph.concat(&[pl, r], 0)
    })
}

fn point_loss_wrt_mlp() -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let mut store = ParamStore::new();
    let logits = store.add("logits", uniform(&mut rng, &[1, 6, 8, 8], -1.0, 1.0), false);
    let lattice = store.add(
        "lattice",
        uniform(&mut rng, &[1, 4, 2, 2], -1.0, 1.0),
        false,
    );
    let fine = store.add("fine", uniform(&mut rng, &[1, 3, 4, 4], -1.0, 1.0), false);
    let head = PointHead::new(&mut store, &mut rng, 7, &[8, 8], 6, 0.1);
    randomise(&mut store, 27);
    let labels: Vec<u8> = (0..64).map(|i| (i % 6) as u8).collect();
    check(store, Mode::Eval, 27, POINTS, move |s| {
        let (lg, la, fi) = (s.param(logits), s.param(lattice), s.param(fine));
        let out = head.forward(s, lg, la, fi)?;
        let pts: Vec<u8> = out
            .flat_points()
            .iter()
            .map(|&(_, y, x)| labels[y * 8 + x])
            .collect();
        Ok(cross_entropy(s, out.point_logits.unwrap(), &pts, IGNORE_INDEX)?.loss)
    })
}

fn losses() -> FdReport {
    let (store, ids) = store_of(
        23,
        &[
            ("logits", &[1, 6, 8, 8], -2.0, 2.0),
            ("pts", &[5, 6], -2.0, 2.0),
            ("la", &[1, 6, 4], -3.0, -0.5),
        ],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut labels: Vec<u8> = (0..64).map(|_| rng.gen_range(0..6)).collect();
    labels[9] = IGNORE_INDEX;
    let points = vec![(0, 0, 1), (0, 3, 3), (0, 7, 2), (0, 1, 1), (0, 5, 6)];
    let cfg = LossConfig {
        lambda_band: 0.4,
        lambda_point: 0.7,
        band_width: 1,
    };
    check(store, Mode::Eval, 23, POINTS, move |s| {
        let v: Vec<_> = ids.iter().map(|&i| s.param(i)).collect();
        let parts = total_loss(
            s,
            LossInputs {
                refined: v[0],
                point_logits: Some(v[1]),
                points: &points,
                log_attn: Some((v[2], 2, 2)),
                labels: &labels,
            },
            &cfg,
        )?;
        let ce = cross_entropy(s, v[0], &labels, IGNORE_INDEX)?;
        let ce = s.graph.reshape(ce.loss, &[1])?;
        let t = s.graph.reshape(parts.total, &[1])?;
        s.graph.concat(&[t, ce], 0)
    })
}

fn regularizer() -> FdReport {
    let (store, ids) = store_of(24, &[("la", &[2, 6, 12], -4.0, 0.0)]);
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let labels: Vec<u8> = (0..24).map(|_| rng.gen_range(0..6)).collect();
    let band: Vec<bool> = (0..24).map(|i| i % 3 != 0).collect();
    check(store, Mode::Eval, 24, POINTS, move |s| {
        let la = s.param(ids[0]);
        band_regularizer(s, la, &labels, &band, 0.4, IGNORE_INDEX)
    })
}

fn encoder() -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let mut store = ParamStore::new();
    let image = store.add(
        "image",
        uniform(&mut rng, &[2, 3, 32, 32], -1.0, 1.0),
        false,
    );
    let enc = Encoder::new(&mut store, &mut rng, 3, &[3, 4, 4, 5]);
    check(store, Mode::Train, 25, POINTS, move |s| {
        let x = s.param(image);
        let p = enc.forward(s, x)?;
        let a = s.graph.reshape(p.fine(), &[2 * 4 * 8 * 8])?;
        let b = s.graph.reshape(p.coarsest(), &[2 * 5 * 2 * 2])?;
        s.graph.concat(&[a, b], 0)
    })
}

fn full_model_loss() -> FdReport {
    let cfg = ModelConfig {
        widths: vec![3, 4, 5, 6],
        embed_dim: 6,
        key_dim: 6,
        edge_dim: 3,
        grid_dim: 3,
        point_hidden: vec![8],
        point_budget: 0.02,
        ..Default::default()
    };
    let mut model = CstrModel::<f64>::new(cfg, 26).unwrap();
    randomise(&mut model.params, 26);
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let images: Vec<_> = (0..2)
        .map(|_| {
            cstr_core::data::Image::new(
                32,
                32,
                (0..3 * 32 * 32).map(|_| rng.gen_range(0..=255u8)).collect(),
            )
        })
        .collect();
    let refs: Vec<_> = images.iter().collect();
    let x = images_to_tensor::<f64>(&refs).unwrap();
    let labels: Vec<u8> = (0..2 * 32 * 32)
        .map(|i| ((i / 32) / 6 + (i % 32) / 11) as u8 % 6)
        .collect();
    let store = model.params.clone();
    check(store, Mode::Train, 26, POINTS, move |s| {
        let xv = s.graph.constant(x.clone());
        let out = model.forward(s, xv)?;
        Ok(model.loss(s, &out, &labels, &LossConfig::default())?.total)
    })
}

/// Every case, named by the operation it covers.
pub fn cases() -> Vec<Case> {
    vec![
        ("elementwise arithmetic", elementwise),
        ("magnitude", magnitude),
        ("reductions", reductions),
        ("batched matmul", matmul),
        ("softmax / log-softmax", softmax),
        ("weighted nll", nll),
        ("conv 3x3 + bias", conv_dense),
        ("conv stride 2", conv_strided),
        ("conv depthwise", conv_depthwise),
        ("conv pointwise", conv_pointwise),
        ("batch norm", batch_norm),
        ("resize / avg-pool", resample),
        ("point sample / scatter / reshape", points),
        ("class attention", class_attention_t1),
        ("local refinement", local_refinement),
        ("scale weights + aggregation", scale_aggregation),
        ("sobel / edge / grid paths", structural_paths),
        ("cross-scale attention", cross_scale),
        ("gate", gating),
        ("fuse", fusion),
        ("coarse head", coarse_head),
        ("point MLP", point_mlp),
        ("point loss wrt MLP weights", point_loss_wrt_mlp),
        ("losses", losses),
        ("band regularizer", regularizer),
        ("encoder", encoder),
        ("full model loss", full_model_loss),
    ]
}
