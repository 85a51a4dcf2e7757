use cstr_core::data::{generate_scene, perturb_labels, LabelMap, SceneConfig};
use cstr_validation::noise_oracle::{check_contract, sweep};
use proptest::prelude::*;

#[test]
fn hundred_seeds_per_radius_respect_the_contract() {
    let totals = sweep(&[0, 1, 3, 5], 100).unwrap();
    assert_eq!(totals[0], 0);
}

#[test]
fn larger_radii_corrupt_more_pixels() {
    let clean = generate_scene(&SceneConfig::default(), 1).labels;
    let changed = |r| -> usize {
        (0..20u64)
            .map(|s| check_contract(&clean, &perturb_labels(&clean, r, 0.5, s), r).unwrap())
            .sum()
    };
    let (c1, c3, c5) = (changed(1), changed(3), changed(5));
    assert!(c1 < c3 && c3 < c5, "{c1} {c3} {c5}");
}

#[test]
fn uniform_maps_never_change() {
    let l = LabelMap::filled(16, 16, 2);
    assert_eq!(perturb_labels(&l, 5, 1.0, 0), l);
}

proptest! {
    #[test]
    fn contract_holds_for_arbitrary_maps(
        h in 1usize..12,
        w in 1usize..12,
        r in 0usize..4,
        seed in any::<u64>(),
        p in 0.0f64..=1.0,
        cells in proptest::collection::vec(0u8..6, 144),
    ) {
        let clean = LabelMap::new(h, w, cells[..h * w].to_vec());
        let noisy = perturb_labels(&clean, r, p, seed);
        prop_assert!(check_contract(&clean, &noisy, r).is_ok());
        prop_assert_eq!(&noisy, &perturb_labels(&clean, r, p, seed));
    }
}
