//! Post-hoc check of the label jitter contract.

use cstr_core::data::{generate_scene, perturb_labels, LabelMap, SceneConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Distinct labels within Chebyshev distance `r` of `(y, x)`, and whether any
/// of them differs from the pixel itself.
fn neighbourhood(l: &LabelMap, y: usize, x: usize, r: usize) -> (Vec<u8>, bool) {
    let mut seen = Vec::new();
    let mut near_boundary = false;
    for yy in y.saturating_sub(r)..=(y + r).min(l.height - 1) {
        for xx in x.saturating_sub(r)..=(x + r).min(l.width - 1) {
            let v = l.get(yy, xx);
            near_boundary |= v != l.get(y, x);
            if !seen.contains(&v) {
                seen.push(v);
            }
        }
    }
    (seen, near_boundary)
}

pub fn check_contract(clean: &LabelMap, noisy: &LabelMap, r: usize) -> Result<usize, String> {
    if r == 0 && clean != noisy {
        return Err("r = 0 changed the map".into());
    }
    let mut changed = 0;
    for y in 0..clean.height {
        for x in 0..clean.width {
            let (a, b) = (clean.get(y, x), noisy.get(y, x));
            if a == b {
                continue;
            }
            changed += 1;
            let (labels, near) = neighbourhood(clean, y, x, r);
            if !near {
                return Err(format!("({y},{x}) changed away from every boundary"));
            }
            if !labels.contains(&b) {
                return Err(format!("({y},{x}) took label {b} not present nearby"));
            }
        }
    }
    Ok(changed)
}

/// Label maps for one seed: a generated scene and a blocky random map.
fn maps(seed: u64) -> [LabelMap; 2] {
    let scene = generate_scene(&SceneConfig::default(), seed).labels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (rng.gen_range(8..32), rng.gen_range(8..32));
    let block = rng.gen_range(1..5);
    let cells: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..6)).collect();
    let data = (0..h * w)
        .map(|i| cells[(i / w / block) * w + (i % w) / block])
        .collect();
    [scene, LabelMap::new(h, w, data)]
}

/// Checks every radius over `seeds` seeds, each on fresh maps and rerun once
/// for reproducibility; returns the changed-pixel count per radius.
pub fn sweep(radii: &[usize], seeds: u64) -> Result<Vec<usize>, String> {
    let mut totals = Vec::new();
    for &r in radii {
        let mut total = 0;
        for seed in 0..seeds {
            for clean in maps(seed) {
                let noisy = perturb_labels(&clean, r, 0.5, seed);
                total += check_contract(&clean, &noisy, r)
                    .map_err(|e| format!("r = {r}, seed {seed}: {e}"))?;
                if noisy != perturb_labels(&clean, r, 0.5, seed) {
                    return Err(format!("r = {r}, seed {seed} is not reproducible"));
                }
            }
        }
        if r > 0 && total == 0 {
            return Err(format!("r = {r} never changed anything"));
        }
        totals.push(total);
    }
    Ok(totals)
}
