use cstr_core::data::{
    generate_dataset, generate_scene, read_dataset, remap_labels, rugd_groups, write_dataset,
    LabelMapping, RemapError, SceneConfig, TerrainClass,
};

const OBSTACLE: u8 = 4;

/// A run of at most three obstacle pixels in some row that continues
/// vertically for at least `min_len` rows.
fn has_thin_stroke(l: &[u8], h: usize, w: usize, min_len: usize) -> bool {
    for y in 0..h {
        let row = &l[y * w..(y + 1) * w];
        let mut x = 0;
        while x < w {
            if row[x] != OBSTACLE {
                x += 1;
                continue;
            }
            let start = x;
            while x < w && row[x] == OBSTACLE {
                x += 1;
            }
            if x - start > 3 {
                continue;
            }
            let tall = (start..x).any(|c| {
                let mut n = 0;
                let mut yy = y;
                while yy < h && l[yy * w + c] == OBSTACLE {
                    n += 1;
                    yy += 1;
                }
                n >= min_len
            });
            if tall {
                return true;
            }
        }
    }
    false
}

#[test]
fn most_scenes_contain_a_thin_obstacle_stroke() {
    let mut hits = 0;
    for seed in 0..1000u64 {
        let cfg = SceneConfig {
            seed,
            ..Default::default()
        };
        let s = generate_scene(&cfg, 0);
        hits += has_thin_stroke(&s.labels.data, 64, 64, 8) as usize;
    }
    println!("thin strokes in {hits}/1000 scenes");
    assert!(hits >= 950, "{hits}");
}

#[test]
fn class_frequencies_are_imbalanced() {
    let samples = generate_dataset(&SceneConfig::default(), 0, 1000);
    let mut counts = [0u64; 6];
    for s in &samples {
        for &v in &s.labels.data {
            counts[v as usize] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let share: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    println!("class shares {share:.4?}");
    assert!(share[OBSTACLE as usize] < 0.05);
    let mut sorted = share.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    assert!(sorted[0] + sorted[1] > 0.5);
    assert!(share.iter().all(|&s| s > 0.0));
}

#[test]
fn scenes_are_deterministic_in_seed_and_index() {
    let cfg = SceneConfig {
        seed: 11,
        ..Default::default()
    };
    assert_eq!(generate_scene(&cfg, 3), generate_scene(&cfg, 3));
    assert_ne!(generate_scene(&cfg, 3), generate_scene(&cfg, 4));
    assert!(generate_scene(&cfg, 3).labels.data.iter().all(|&v| v < 6));
}

#[test]
fn dataset_files_roundtrip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SceneConfig {
        seed: 4,
        ..Default::default()
    };
    let samples = generate_dataset(&cfg, 0, 5);
    let (a, b) = (dir.path().join("a.cstr"), dir.path().join("b.cstr"));
    write_dataset(&a, &cfg, &samples).unwrap();
    let back = read_dataset(&a).unwrap();
    assert_eq!(back.samples, samples);
    write_dataset(&b, &back.header.config, &back.samples).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn rugd_names_group_as_tabulated() {
    use TerrainClass::*;
    let table: &[(&[&str], TerrainClass)] = &[
        (&["concrete", "asphalt"], Smooth),
        (&["gravel", "grass", "dirt", "sand"], Rough),
        (&["rock", "rock bed"], Bumpy),
        (&["water", "bushes", "tall vegetation"], Forbidden),
        (&["trees", "poles", "logs"], Obstacle),
        (&["void", "sky", "signs"], Background),
    ];
    let names: Vec<&str> = table.iter().flat_map(|(n, _)| n.iter().copied()).collect();
    let expected: Vec<u8> = table
        .iter()
        .flat_map(|(n, c)| std::iter::repeat(c.label()).take(n.len()))
        .collect();
    let mapping = LabelMapping::from_names(&names, rugd_groups()).unwrap();
    let fine: Vec<u16> = (0..names.len() as u16).collect();
    assert_eq!(remap_labels(&fine, &mapping).unwrap(), expected);
}

#[test]
fn remap_identity_and_missing_labels() {
    let fine: Vec<u16> = vec![0, 5, 3, 3, 1];
    let out = remap_labels(&fine, &LabelMapping::identity(6)).unwrap();
    assert_eq!(out, vec![0, 5, 3, 3, 1]);
    assert_eq!(
        remap_labels(&[0, 9], &LabelMapping::identity(6)),
        Err(RemapError::Unmapped { index: 1, value: 9 })
    );
    assert!(matches!(
        LabelMapping::from_names(&["spaceship"], rugd_groups()),
        Err(RemapError::UnknownName(_))
    ));
}
