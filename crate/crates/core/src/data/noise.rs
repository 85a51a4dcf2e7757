//! Boundary jitter label noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LabelMap;
use crate::band::boundary_band;
use crate::loss::IGNORE_INDEX;

/// Corrupts labels near class transitions.
///
/// Every pixel within Chebyshev distance `r` of a transition is, with
/// probability `flip_prob`, relabelled with a uniform draw from the distinct
/// labels of its `(2r+1)²` neighbourhood (which includes its own label).
/// Ignored pixels are never changed or drawn. Pixels are visited in row-major
/// order from a ChaCha8 stream seeded by `seed`.
pub fn perturb_labels(labels: &LabelMap, r: usize, flip_prob: f64, seed: u64) -> LabelMap {
    let (h, w) = (labels.height, labels.width);
    let band = boundary_band(&labels.data, h, w, r);
    let mut out = labels.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = [false; 256];
    let mut choices = Vec::with_capacity(8);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !band[i] || labels.data[i] == IGNORE_INDEX {
                continue;
            }
            if !rng.gen_bool(flip_prob) {
                continue;
            }
            choices.clear();
            for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                    let v = labels.data[yy * w + xx];
                    if v != IGNORE_INDEX && !seen[v as usize] {
                        seen[v as usize] = true;
                        choices.push(v);
                    }
                }
            }
            choices.sort_unstable();
            for &v in &choices {
                seen[v as usize] = false;
            }
            out.data[i] = choices[rng.gen_range(0..choices.len())];
        }
    }
    out
}
