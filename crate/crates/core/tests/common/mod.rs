//! Shared test oracles. Nothing here calls into the code paths it checks.
#![allow(dead_code)]

use dtml::grid::{Geometry, Mask, Volume};
use dtml::losses::LossGrad;
use dtml::nn::{value_and_grad, ArchDescriptor, Backbone, Head, NetworkParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random mask; `density` is the per-voxel foreground probability. Retries
/// until the mask has both foreground and background.
pub fn random_mask(geom: Geometry, density: f64, rng: &mut ChaCha8Rng) -> Mask {
    loop {
        let data: Vec<bool> = (0..geom.len()).map(|_| rng.gen_bool(density)).collect();
        let m = Mask::new(geom, data).unwrap();
        if !m.is_degenerate() {
            return m;
        }
    }
}

/// Random union of axis-aligned boxes, a blob-like mask with real interiors.
pub fn random_boxes(geom: Geometry, boxes: usize, rng: &mut ChaCha8Rng) -> Mask {
    loop {
        let mut m = Mask::empty(geom);
        for _ in 0..boxes {
            let lo: Vec<usize> = geom.shape.iter().map(|&n| rng.gen_range(0..n)).collect();
            let hi: Vec<usize> = geom
                .shape
                .iter()
                .zip(&lo)
                .map(|(&n, &l)| (l + rng.gen_range(1..=n / 2 + 1)).min(n))
                .collect();
            for z in lo[2]..hi[2] {
                for y in lo[1]..hi[1] {
                    for x in lo[0]..hi[0] {
                        m.set(x, y, z, true);
                    }
                }
            }
        }
        if !m.is_degenerate() {
            return m;
        }
    }
}

/// Foreground voxels with a face neighbour inside the volume that is background.
pub fn brute_boundary(m: &Mask) -> Vec<[usize; 3]> {
    let [nx, ny, nz] = m.shape();
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !m.get(x, y, z) {
                    continue;
                }
                let mut nbrs = Vec::new();
                if x > 0 {
                    nbrs.push((x - 1, y, z));
                }
                if x + 1 < nx {
                    nbrs.push((x + 1, y, z));
                }
                if y > 0 {
                    nbrs.push((x, y - 1, z));
                }
                if y + 1 < ny {
                    nbrs.push((x, y + 1, z));
                }
                if z > 0 {
                    nbrs.push((x, y, z - 1));
                }
                if z + 1 < nz {
                    nbrs.push((x, y, z + 1));
                }
                if nbrs.iter().any(|&(a, b, c)| !m.get(a, b, c)) {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn phys_dist(g: &Geometry, a: [usize; 3], b: [usize; 3]) -> f64 {
    (0..3)
        .map(|k| ((a[k] as f64 - b[k] as f64) * g.spacing[k]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// All-pairs signed distance: min over boundary voxels, signed by membership.
pub fn brute_sdm(m: &Mask) -> Vec<f64> {
    let g = *m.geometry();
    let boundary = brute_boundary(m);
    let [nx, ny, nz] = g.shape;
    let mut out = vec![0.0; g.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x, y, z];
                if boundary.contains(&p) {
                    continue;
                }
                let d = boundary
                    .iter()
                    .map(|&b| phys_dist(&g, p, b))
                    .fold(f64::INFINITY, f64::min);
                out[x + nx * (y + ny * z)] = if m.get(x, y, z) { -d } else { d };
            }
        }
    }
    out
}

/// Directed nearest-boundary distances from `a`'s boundary to `b`'s.
pub fn brute_directed(a: &Mask, b: &Mask) -> Vec<f64> {
    let g = *a.geometry();
    let ba = brute_boundary(a);
    let bb = brute_boundary(b);
    ba.iter()
        .map(|&p| {
            bb.iter()
                .map(|&q| phys_dist(&g, p, q))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

pub fn brute_percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q / 100.0 * (v.len() as f64 - 1.0);
    let i = pos as usize;
    if i + 1 >= v.len() {
        return v[v.len() - 1];
    }
    v[i] * (1.0 - (pos - i as f64)) + v[i + 1] * (pos - i as f64)
}

pub fn random_volume(shape: [usize; 3], seed: u64) -> Volume {
    let mut r = rng(seed);
    let g = Geometry::isotropic(shape).unwrap();
    Volume::new(g, (0..g.len()).map(|_| r.gen_range(-1.5..1.5)).collect()).unwrap()
}

pub fn gradcheck_descriptor() -> ArchDescriptor {
    ArchDescriptor {
        levels: 2,
        base_width: 4,
        kernel_size: 3,
        convs_per_block: 2,
    }
}

pub struct GradCheck {
    /// ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖) over all parameters.
    pub relative_error: f64,
    /// Largest per-parameter relative error among parameters whose numeric
    /// gradient exceeds 1e-3 of the largest one.
    pub worst_component: f64,
    pub norm: f64,
    pub params: usize,
}

/// Compares the backpropagated gradient of `loss ∘ head ∘ network` with
/// central differences over every scalar parameter.
pub fn gradcheck<F>(params: &NetworkParams, x: &Volume, head: Head, step: f64, loss: F) -> GradCheck
where
    F: Fn(&[f64]) -> LossGrad,
{
    let backbone = Backbone::new(params.descriptor).unwrap();
    let (_, grads) = value_and_grad(&backbone, params, x, head, |o| Ok(loss(o))).unwrap();
    let analytic: Vec<f64> = grads.into_iter().flatten().collect();
    let eval = |p: &NetworkParams| {
        let out = dtml::nn::forward_head(p, x, head).unwrap();
        loss(&out).value
    };
    let mut work = params.clone();
    let numeric: Vec<f64> = (0..analytic.len())
        .map(|i| {
            let orig = *work.scalar_mut(i);
            *work.scalar_mut(i) = orig + step;
            let up = eval(&work);
            *work.scalar_mut(i) = orig - step;
            let down = eval(&work);
            *work.scalar_mut(i) = orig;
            (up - down) / (2.0 * step)
        })
        .collect();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    let max_n = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let worst_component = analytic
        .iter()
        .zip(&numeric)
        .filter(|(_, n)| n.abs() > 1e-3 * max_n)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
        .fold(0.0, f64::max);
    GradCheck {
        relative_error: if scale > 0.0 { norm(&diff) / scale } else { 0.0 },
        worst_component,
        norm: scale,
        params: analytic.len(),
    }
}
