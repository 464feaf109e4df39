mod common;

use common::{random_boxes, rng};
use dtml::losses::{
    lambda_con, loss_consistency, loss_consistency_with_grad, loss_dis, loss_mask,
    loss_mask_with_grad, loss_seg, loss_seg_with_grad, RampUpSchedule,
};
use dtml::sdm::{compute_sdm, normalize_sdm, TransformConfig};
use dtml::{Geometry, Mask, ProbabilityMap, SignedDistanceMap};
use rand::Rng;

fn geom() -> Geometry {
    Geometry::new([6, 5, 4], [1.0, 1.0, 1.5]).unwrap()
}

fn probs(seed: u64) -> ProbabilityMap {
    let mut r = rng(seed);
    ProbabilityMap::new(geom(), (0..120).map(|_| r.gen_range(0.01..0.99)).collect()).unwrap()
}

fn distances(seed: u64) -> SignedDistanceMap {
    let mut r = rng(seed);
    SignedDistanceMap::new(geom(), (0..120).map(|_| r.gen_range(-0.02..0.02)).collect(), true).unwrap()
}

fn target(seed: u64) -> Mask {
    random_boxes(geom(), 2, &mut rng(seed))
}

fn oracle_seg(p: &[f64], g: &[f64]) -> f64 {
    let inter: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    let dice = 1.0 - (2.0 * inter + 1e-5) / (p.iter().sum::<f64>() + g.iter().sum::<f64>() + 1e-5);
    let ce = -p
        .iter()
        .zip(g)
        .map(|(&a, &b)| b * a.ln() + (1.0 - b) * (1.0 - a).ln())
        .sum::<f64>()
        / p.len() as f64;
    0.5 * dice + 0.5 * ce
}

fn sigmoid_mask(z: &[f64], k: f64) -> Vec<f64> {
    z.iter().map(|&v| 1.0 / (1.0 + (k * v).exp())).collect()
}

#[test]
fn values_match_closed_forms() {
    let cfg = TransformConfig::new(1500.0).unwrap();
    for s in 0..5 {
        let (p, z, w, m) = (probs(s), distances(s + 10), distances(s + 20), target(s));
        let g = m.to_f64();
        assert!((loss_seg(&p, &m).unwrap() - oracle_seg(p.data(), &g)).abs() < 1e-12);
        let mse: f64 = z.data().iter().zip(w.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 120.0;
        assert!((loss_dis(&z, &w).unwrap() - mse).abs() < 1e-15);
        let q = sigmoid_mask(z.data(), 1500.0);
        let inter: f64 = q.iter().zip(&g).map(|(a, b)| a * b).sum();
        let soft = 1.0 - (2.0 * inter + 1e-5) / (q.iter().sum::<f64>() + g.iter().sum::<f64>() + 1e-5);
        assert!((loss_mask(&z, &m, cfg).unwrap() - soft).abs() < 1e-12);
        let con: f64 = p.data().iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 120.0;
        assert!((loss_consistency(&p, &z, cfg).unwrap() - con).abs() < 1e-15);
    }
}

#[test]
fn gradients_in_outputs_match_differences() {
    let cfg = TransformConfig::new(100.0).unwrap();
    let h = 1e-6;
    let (p, z, m) = (probs(1), distances(2), target(3));
    let seg = loss_seg_with_grad(&p, &m).unwrap();
    let mask = loss_mask_with_grad(&z, &m, cfg).unwrap();
    let (_, dp, dz) = loss_consistency_with_grad(&p, &z, cfg).unwrap();
    for i in [0, 17, 59, 119] {
        let bump_p = |d: f64| {
            let mut v = p.data().to_vec();
            v[i] += d;
            ProbabilityMap::new(geom(), v).unwrap()
        };
        let bump_z = |d: f64| {
            let mut v = z.data().to_vec();
            v[i] += d;
            SignedDistanceMap::new(geom(), v, true).unwrap()
        };
        let num = (loss_seg(&bump_p(h), &m).unwrap() - loss_seg(&bump_p(-h), &m).unwrap()) / (2.0 * h);
        assert!((seg.grad[i] - num).abs() < 1e-6 * num.abs().max(1.0));
        let num = (loss_mask(&bump_z(h), &m, cfg).unwrap() - loss_mask(&bump_z(-h), &m, cfg).unwrap()) / (2.0 * h);
        assert!((mask.grad[i] - num).abs() < 1e-6 * num.abs().max(1.0));
        let c = |pp: &ProbabilityMap, zz: &SignedDistanceMap| loss_consistency(pp, zz, cfg).unwrap();
        let num = (c(&bump_p(h), &z) - c(&bump_p(-h), &z)) / (2.0 * h);
        assert!((dp[i] - num).abs() < 1e-8);
        let num = (c(&p, &bump_z(h)) - c(&p, &bump_z(-h))) / (2.0 * h);
        assert!((dz[i] - num).abs() < 1e-6 * num.abs().max(1.0));
    }
}

#[test]
fn perfect_agreement_is_nearly_free() {
    let cfg = TransformConfig::new(1500.0).unwrap();
    let m = target(4);
    let exact = normalize_sdm(&compute_sdm(&m).unwrap()).unwrap();
    assert!(loss_seg(&ProbabilityMap::from_mask(&m), &m).unwrap() < 1e-3);
    assert_eq!(loss_dis(&exact, &exact).unwrap(), 0.0);
    let b = common::brute_boundary(&m).len() as f64;
    let fg = m.count() as f64;
    let want = 1.0 - (2.0 * (fg - b / 2.0) + 1e-5) / (2.0 * fg - b / 2.0 + 1e-5);
    assert!((loss_mask(&exact, &m, cfg).unwrap() - want).abs() < 1e-12);
    let p = dtml::sdm::sdm_to_soft_mask(&exact, cfg);
    assert_eq!(loss_consistency(&p, &exact, cfg).unwrap(), 0.0);
    for s in 0..5 {
        assert!(loss_seg(&probs(s), &m).unwrap() >= 0.0);
        assert!(loss_mask(&distances(s), &m, cfg).unwrap() >= 0.0);
    }
}

#[test]
fn raw_distances_rejected() {
    let raw = SignedDistanceMap::new(geom(), vec![3.0; 120], false).unwrap();
    let cfg = TransformConfig::new(1500.0).unwrap();
    assert!(loss_dis(&raw, &distances(0)).is_err());
    assert!(loss_mask(&raw, &target(0), cfg).is_err());
    assert!(loss_consistency(&probs(0), &raw, cfg).is_err());
}

#[test]
fn ramp_up_shape() {
    let s = RampUpSchedule::new(0.1, 1000);
    assert_eq!(lambda_con(1000, &s), 0.1);
    assert_eq!(lambda_con(5000, &s), 0.1);
    assert!((lambda_con(0, &s) - 0.1 * (-5.0f64).exp()).abs() < 1e-12);
    assert!((lambda_con(500, &s) - 0.1 * (-2.5f64).exp()).abs() < 1e-15);
    let sq = RampUpSchedule {
        exponent_squared: true,
        ..s
    };
    assert!((lambda_con(500, &sq) - 0.1 * (-1.25f64).exp()).abs() < 1e-15);
    for sched in [s, sq] {
        let w: Vec<f64> = (0..=100).map(|i| lambda_con(i * 10, &sched)).collect();
        assert!(w.windows(2).all(|p| p[1] >= p[0]));
    }
    assert_eq!(lambda_con(3, &RampUpSchedule::new(0.0, 10)), 0.0);
}
