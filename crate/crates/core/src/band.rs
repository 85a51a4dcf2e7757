//! Chebyshev-distance neighbourhoods on label maps.

fn window_extrema(
    src: &[u8],
    h: usize,
    w: usize,
    r: usize,
    horizontal: bool,
) -> (Vec<u8>, Vec<u8>) {
    let mut lo = vec![0u8; src.len()];
    let mut hi = vec![0u8; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (pos, len) = if horizontal { (x, w) } else { (y, h) };
            let (a, b) = (pos.saturating_sub(r), (pos + r).min(len - 1));
            let (mut mn, mut mx) = (u8::MAX, u8::MIN);
            for p in a..=b {
                let v = if horizontal {
                    src[y * w + p]
                } else {
                    src[p * w + x]
                };
                mn = mn.min(v);
                mx = mx.max(v);
            }
            lo[y * w + x] = mn;
            hi[y * w + x] = mx;
        }
    }
    (lo, hi)
}

/// Pixels with a differently labelled pixel within Chebyshev distance `r`.
///
/// Every value, including an ignore value, counts as its own label. `r = 0`
/// yields an empty band.
pub fn boundary_band(labels: &[u8], h: usize, w: usize, r: usize) -> Vec<bool> {
    assert_eq!(labels.len(), h * w, "label map size");
    if r == 0 || labels.is_empty() {
        return vec![false; labels.len()];
    }
    let (lo, hi) = window_extrema(labels, h, w, r, true);
    let (lo, _) = window_extrema(&lo, h, w, r, false);
    let (_, hi) = window_extrema(&hi, h, w, r, false);
    lo.iter().zip(&hi).map(|(a, b)| a != b).collect()
}

/// Chebyshev dilation of a mask by `t`.
pub fn dilate(mask: &[bool], h: usize, w: usize, t: usize) -> Vec<bool> {
    assert_eq!(mask.len(), h * w, "mask size");
    if t == 0 || mask.is_empty() {
        return mask.to_vec();
    }
    let bytes: Vec<u8> = mask.iter().map(|&m| m as u8).collect();
    let (_, hi) = window_extrema(&bytes, h, w, t, true);
    let (_, hi) = window_extrema(&hi, h, w, t, false);
    hi.iter().map(|&v| v != 0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_band(l: &[u8], h: usize, w: usize, r: usize) -> Vec<bool> {
        let r = r as isize;
        (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as isize, (i % w) as isize);
                (-r..=r).any(|dy| {
                    (-r..=r).any(|dx| {
                        let (yy, xx) = (y + dy, x + dx);
                        yy >= 0
                            && xx >= 0
                            && yy < h as isize
                            && xx < w as isize
                            && l[yy as usize * w + xx as usize] != l[i]
                    })
                })
            })
            .collect()
    }

    #[test]
    fn half_planes_band_is_two_columns() {
        let l: Vec<u8> = (0..36).map(|i| if i % 6 < 3 { 1 } else { 4 }).collect();
        let b = boundary_band(&l, 6, 6, 1);
        for (i, &v) in b.iter().enumerate() {
            assert_eq!(v, i % 6 == 2 || i % 6 == 3);
        }
        assert_eq!(b, brute_band(&l, 6, 6, 1));
    }

    #[test]
    fn degenerate_bands() {
        let one = vec![2u8; 20];
        assert!(boundary_band(&one, 4, 5, 3).iter().all(|&v| !v));
        let two: Vec<u8> = (0..20).map(|i| (i == 7) as u8).collect();
        assert!(boundary_band(&two, 4, 5, 0).iter().all(|&v| !v));
        assert!(boundary_band(&two, 4, 5, 5).iter().all(|&v| v));
    }

    proptest! {
        #[test]
        fn band_matches_brute_force(h in 1usize..9, w in 1usize..9, r in 0usize..4, seed in proptest::collection::vec(0u8..3, 64)) {
            let l = &seed[..h * w];
            prop_assert_eq!(boundary_band(l, h, w, r), brute_band(l, h, w, r));
        }

        #[test]
        fn dilation_matches_brute_force(h in 1usize..9, w in 1usize..9, t in 0usize..3, seed in proptest::collection::vec(any::<bool>(), 64)) {
            let m = &seed[..h * w];
            let got = dilate(m, h, w, t);
            for i in 0..h * w {
                let (y, x) = (i / w, i % w);
                let expect = (0..h * w).any(|j| m[j] && (j / w).abs_diff(y) <= t && (j % w).abs_diff(x) <= t);
                prop_assert_eq!(got[i], expect);
            }
        }
    }
}
