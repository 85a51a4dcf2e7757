//! Metrics by direct pixel-by-pixel counting.

use cstr_core::loss::IGNORE_INDEX;
use cstr_core::metrics::{boundary_f1, boundary_iou, confusion, miou_aacc};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const H: usize = 8;
pub const W: usize = 8;
pub const K: usize = 6;

fn near(w: usize, i: usize, j: usize, d: usize) -> bool {
    let (yi, xi, yj, xj) = (
        (i / w) as isize,
        (i % w) as isize,
        (j / w) as isize,
        (j % w) as isize,
    );
    (yi - yj).abs().max((xi - xj).abs()) <= d as isize
}

fn band(l: &[u8], w: usize, d: usize) -> Vec<bool> {
    (0..l.len())
        .map(|i| d > 0 && (0..l.len()).any(|j| near(w, i, j, d) && l[j] != l[i]))
        .collect()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub struct Oracle {
    pub miou: f64,
    pub aacc: f64,
    pub biou: f64,
    pub f1: f64,
}

pub fn oracle(p: &[u8], g: &[u8], d: usize, t: usize) -> Oracle {
    let valid: Vec<usize> = (0..g.len()).filter(|&i| g[i] != IGNORE_INDEX).collect();
    let mut ious = Vec::new();
    for c in 0..K as u8 {
        let inter = valid.iter().filter(|&&i| p[i] == c && g[i] == c).count();
        let uni = valid.iter().filter(|&&i| p[i] == c || g[i] == c).count();
        if uni > 0 {
            ious.push(inter as f64 / uni as f64);
        }
    }
    let correct = valid.iter().filter(|&&i| p[i] == g[i]).count();

    let (bp, bg) = (band(p, W, d), band(g, W, d));
    let support: Vec<usize> = valid.iter().copied().filter(|&i| bp[i] || bg[i]).collect();
    let mut bious = Vec::new();
    for c in 0..K as u8 {
        let inter = support.iter().filter(|&&i| p[i] == c && g[i] == c).count();
        let uni = support.iter().filter(|&&i| p[i] == c || g[i] == c).count();
        if uni > 0 {
            bious.push(inter as f64 / uni as f64);
        }
    }

    let (ep, eg) = (band(p, W, 1), band(g, W, 1));
    let ep: Vec<usize> = (0..p.len()).filter(|&i| ep[i]).collect();
    let eg: Vec<usize> = (0..g.len()).filter(|&i| eg[i]).collect();
    let pm = ep
        .iter()
        .filter(|&&i| eg.iter().any(|&j| near(W, i, j, t)))
        .count();
    let gm = eg
        .iter()
        .filter(|&&i| ep.iter().any(|&j| near(W, i, j, t)))
        .count();
    let f1 = match (ep.len(), eg.len()) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        (np, ng) => {
            let (pr, rc) = (pm as f64 / np as f64, gm as f64 / ng as f64);
            if pr + rc == 0.0 {
                0.0
            } else {
                2.0 * pr * rc / (pr + rc)
            }
        }
    };
    Oracle {
        miou: mean(&ious),
        aacc: correct as f64 / valid.len() as f64,
        biou: if bious.is_empty() { 1.0 } else { mean(&bious) },
        f1,
    }
}

/// Blocky maps so that boundaries are neither everywhere nor absent.
pub fn random_map(rng: &mut ChaCha8Rng, ignore: bool) -> Vec<u8> {
    let style = rng.gen_range(0..3);
    (0..H * W)
        .map(|i| {
            if ignore && rng.gen_bool(0.05) {
                return IGNORE_INDEX;
            }
            match style {
                0 => rng.gen_range(0..K as u8),
                1 => (((i / W) / 3 + (i % W) / 4) % K) as u8,
                _ => rng.gen_range(0..2u8) * 3,
            }
        })
        .collect()
}

/// Compares every metric of one pair with the oracle, bit for bit.
pub fn check_pair(p: &[u8], g: &[u8]) -> Result<(), String> {
    let o = oracle(p, g, 2, 1);
    let cm = confusion(p, g, K, IGNORE_INDEX).map_err(|e| e.to_string())?;
    let (miou, aacc) = miou_aacc(&cm).map_err(|e| e.to_string())?;
    let biou = boundary_iou(p, g, H, W, 2, K, IGNORE_INDEX).map_err(|e| e.to_string())?;
    let f1 = boundary_f1(p, g, H, W, 1).map_err(|e| e.to_string())?;
    let got = [miou, aacc, biou, f1];
    let want = [o.miou, o.aacc, o.biou, o.f1];
    if got != want {
        return Err(format!("metrics {got:?}, brute force {want:?}"));
    }
    Ok(())
}

/// Random pair `(pred, gt)`; the prediction is sometimes a corrupted copy.
pub fn random_pair(rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<u8>) {
    let g = random_map(rng, false);
    let p = if rng.gen_bool(0.3) {
        g.iter()
            .map(|&v| {
                if rng.gen_bool(0.2) {
                    rng.gen_range(0..K as u8)
                } else {
                    v
                }
            })
            .collect()
    } else {
        random_map(rng, false)
    };
    (p, g)
}
