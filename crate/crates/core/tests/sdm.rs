mod common;

use common::{brute_boundary, brute_sdm, random_boxes, random_mask, rng};
use dtml::sdm::{
    compute_sdm, extract_boundary, normalize_sdm, sdm_to_soft_mask, soft_mask_value,
    TransformConfig,
};
use dtml::{binarize, DtmlError, Geometry, Mask, SignedDistanceMap};
use proptest::prelude::*;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn matches_all_pairs_oracle_on_random_masks() {
    let mut r = rng(101);
    let spacings = [[1.0, 1.0, 1.0], [0.625, 0.625, 2.5], [1.5, 0.8, 1.1]];
    for i in 0..12 {
        let g = Geometry::new([16, 16, 16], spacings[i % 3]).unwrap();
        let m = if i % 2 == 0 {
            random_boxes(g, 3, &mut r)
        } else {
            random_mask(g, 0.1, &mut r)
        };
        let got = compute_sdm(&m).unwrap();
        assert!(!got.is_normalized());
        assert!(max_abs_diff(got.data(), &brute_sdm(&m)) < 1e-9, "mask {i}");
    }
}

#[test]
fn frozen_distances_of_a_cube() {
    let g = Geometry::new([7, 7, 7], [1.0, 1.0, 2.0]).unwrap();
    let mut m = Mask::empty(g);
    for z in 2..5 {
        for y in 2..5 {
            for x in 2..5 {
                m.set(x, y, z, true);
            }
        }
    }
    let s = compute_sdm(&m).unwrap();
    let at = |x, y, z| s.data()[g.index(x, y, z)];
    assert_eq!(at(3, 3, 3), -1.0);
    assert_eq!(at(2, 2, 2), 0.0);
    assert_eq!(at(0, 3, 3), 2.0);
    assert_eq!(at(3, 3, 0), 4.0);
    assert_eq!(at(0, 0, 0), 24f64.sqrt());
    assert_eq!(at(0, 3, 0), 20f64.sqrt());
    let n = normalize_sdm(&s).unwrap();
    assert_eq!(n.data()[g.index(6, 6, 6)], 1.0);
    assert!((n.data()[g.index(3, 3, 3)] + 1.0 / 24f64.sqrt()).abs() < 1e-15);
}

#[test]
fn boundary_matches_face_neighbour_rule() {
    let mut r = rng(7);
    let g = Geometry::isotropic([9, 10, 11]).unwrap();
    for _ in 0..10 {
        let m = random_mask(g, 0.4, &mut r);
        let want: Vec<usize> = brute_boundary(&m)
            .into_iter()
            .map(|[x, y, z]| g.index(x, y, z))
            .collect();
        let mut got = extract_boundary(&m).unwrap();
        got.sort_unstable();
        assert_eq!(got, want);
    }
}

#[test]
fn degenerate_masks_rejected() {
    let g = Geometry::isotropic([4, 4, 4]).unwrap();
    let empty = Mask::empty(g);
    let full = Mask::new(g, vec![true; 64]).unwrap();
    for m in [empty, full] {
        assert!(matches!(compute_sdm(&m), Err(DtmlError::DegenerateMask(_))));
        assert!(matches!(extract_boundary(&m), Err(DtmlError::DegenerateMask(_))));
    }
}

#[test]
fn normalization_rules() {
    let g = Geometry::isotropic([2, 1, 1]).unwrap();
    let zero = SignedDistanceMap::new(g, vec![0.0, 0.0], false).unwrap();
    assert!(matches!(normalize_sdm(&zero), Err(DtmlError::DegenerateMap(_))));
    let raw = SignedDistanceMap::new(g, vec![-2.0, 4.0], false).unwrap();
    let n = normalize_sdm(&raw).unwrap();
    assert_eq!(n.data(), &[-0.5, 1.0]);
    assert!(matches!(normalize_sdm(&n), Err(DtmlError::NormalizationMismatch(_))));
}

#[test]
fn soft_mask_frozen_values() {
    assert_eq!(soft_mask_value(0.0, 1500.0), 0.5);
    assert!((soft_mask_value(0.001, 1500.0) - 1.0 / (1.0 + 1.5f64.exp())).abs() < 1e-15);
    assert!((soft_mask_value(-0.1, 10.0) - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
    assert_eq!(soft_mask_value(1.0, 1500.0), 0.0);
    assert_eq!(soft_mask_value(-1.0, 1500.0), 1.0);
    assert!(soft_mask_value(f64::MAX, 1500.0).is_finite());
}

fn arb_mask() -> impl Strategy<Value = Mask> {
    (2usize..9, 2usize..9, 1usize..7, any::<u64>()).prop_filter_map(
        "degenerate",
        |(nx, ny, nz, seed)| {
            let g = Geometry::new([nx, ny, nz], [1.0, 0.7, 1.9]).unwrap();
            let m = random_mask(g, 0.35, &mut rng(seed));
            (!m.is_degenerate()).then_some(m)
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sign_convention(m in arb_mask()) {
        let s = compute_sdm(&m).unwrap();
        let boundary = extract_boundary(&m).unwrap();
        for (i, (&v, &inside)) in s.data().iter().zip(m.data()).enumerate() {
            if boundary.contains(&i) {
                prop_assert_eq!(v, 0.0);
            } else if inside {
                prop_assert!(v < 0.0);
            } else {
                prop_assert!(v > 0.0);
            }
        }
    }

    #[test]
    fn normalized_range_is_unit(m in arb_mask()) {
        let n = normalize_sdm(&compute_sdm(&m).unwrap()).unwrap();
        let peak = n.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        prop_assert!((peak - 1.0).abs() < 1e-15);
    }

    #[test]
    fn threshold_round_trip(m in arb_mask(), k in prop::sample::select(vec![10.0, 100.0, 1500.0])) {
        let n = normalize_sdm(&compute_sdm(&m).unwrap()).unwrap();
        let back = binarize(&sdm_to_soft_mask(&n, TransformConfig::new(k).unwrap()), 0.5).unwrap();
        prop_assert_eq!(back.data(), m.data());
    }

    #[test]
    fn soft_mask_strictly_decreasing(a in -1.0f64..1.0, b in -1.0f64..1.0, k in 1.0f64..200.0) {
        prop_assume!((a - b).abs() > 1e-6);
        prop_assume!(k * a.min(b) > -30.0);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(soft_mask_value(lo, k) > soft_mask_value(hi, k));
    }

    #[test]
    fn soft_mask_never_increases(a in -2.0f64..2.0, b in -2.0f64..2.0, k in 1.0f64..5000.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(soft_mask_value(lo, k) >= soft_mask_value(hi, k));
    }
}
