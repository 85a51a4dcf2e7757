use cstr_core::encoder::Encoder;
use cstr_core::tensor::{Mode, ParamStore, Session, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Output indices along one axis that can see input index `x`, propagated
/// through a strided 3×3 conv and a stride-1 3×3 conv per level.
fn reach(levels: usize, x: usize, size: usize) -> Vec<(usize, usize)> {
    let (mut lo, mut hi) = (x as isize, x as isize);
    let mut n = size as isize;
    let mut out = Vec::new();
    for _ in 0..levels {
        // output o reads inputs 2o-1 ..= 2o+1
        lo = (lo - 1).div_euclid(2) + ((lo - 1).rem_euclid(2) != 0) as isize;
        hi = (hi + 1).div_euclid(2);
        n /= 2;
        lo = (lo - 1).max(0);
        hi = (hi + 1).min(n - 1);
        out.push((lo as usize, hi as usize));
    }
    out
}

fn image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
    Tensor::new(
        &[1, 3, h, w],
        (0..3 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn pyramid(enc: &Encoder, store: &ParamStore<f64>, x: &Tensor<f64>) -> Vec<Tensor<f64>> {
    let mut s = Session::new(store, Mode::Eval);
    let v = s.graph.constant(x.clone());
    let p = enc.forward(&mut s, v).unwrap();
    p.levels.iter().map(|&l| s.value(l).clone()).collect()
}

#[test]
fn single_pixel_changes_stay_inside_the_receptive_field() {
    let (h, w) = (64, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &mut rng, 3, &[4, 6, 6, 8]);
    let base = image(&mut rng, h, w);
    let before = pyramid(&enc, &store, &base);
    for &(py, px) in &[(0usize, 0usize), (31, 17), (40, 63), (7, 50)] {
        let mut x = base.clone();
        for c in 0..3 {
            let v = x.get(&[0, c, py, px]);
            x.set(&[0, c, py, px], v + 5.0);
        }
        let after = pyramid(&enc, &store, &x);
        let (ry, rx) = (reach(4, py, h), reach(4, px, w));
        for (l, (a, b)) in before.iter().zip(&after).enumerate() {
            let sh = a.shape().to_vec();
            let mut any = false;
            for c in 0..sh[1] {
                for y in 0..sh[2] {
                    for xx in 0..sh[3] {
                        if a.get(&[0, c, y, xx]) != b.get(&[0, c, y, xx]) {
                            any = true;
                            let inside = (ry[l].0..=ry[l].1).contains(&y)
                                && (rx[l].0..=rx[l].1).contains(&xx);
                            assert!(
                                inside,
                                "level {l}: ({y},{xx}) changed for pixel ({py},{px})"
                            );
                        }
                    }
                }
            }
            assert!(any, "level {l} ignored pixel ({py},{px})");
        }
    }
}

#[test]
fn levels_halve_and_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &mut rng, 3, &[4, 6, 6, 8]);
    let x = image(&mut rng, 64, 64);
    let a = pyramid(&enc, &store, &x);
    let sizes: Vec<_> = a.iter().map(|t| t.shape()[2..].to_vec()).collect();
    assert_eq!(
        sizes,
        vec![vec![32, 32], vec![16, 16], vec![8, 8], vec![4, 4]]
    );
    assert_eq!(a, pyramid(&enc, &store, &x));
}

#[test]
fn indivisible_extents_ask_for_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &mut rng, 3, &[4, 6, 6, 8]);
    let mut s = Session::new(&store, Mode::Eval);
    let v = s.graph.constant(image(&mut rng, 48, 40));
    let err = enc.forward(&mut s, v).unwrap_err().to_string();
    assert!(err.contains("pad"), "{err}");
}
