//! Signed distance maps of binary masks and the smooth map back to soft
//! foreground probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{DtmlError, Result};
use crate::grid::{Geometry, Mask, ProbabilityMap, SignedDistanceMap};

/// Default steepness of the soft-mask transform on normalized maps.
pub const DEFAULT_K: f64 = 1500.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformConfig {
    pub k: f64,
}

impl TransformConfig {
    pub fn new(k: f64) -> Result<Self> {
        if !(k.is_finite() && k > 0.0) {
            return Err(DtmlError::InvalidConfig(format!(
                "transform steepness k must be finite and positive, got {k}"
            )));
        }
        Ok(Self { k })
    }
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self { k: DEFAULT_K }
    }
}

const NEIGHBOURS: [[isize; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

fn ensure_non_degenerate(mask: &Mask) -> Result<()> {
    let n = mask.count();
    if n == 0 {
        return Err(DtmlError::DegenerateMask("mask has no foreground".into()));
    }
    if n == mask.data().len() {
        return Err(DtmlError::DegenerateMask("mask has no background".into()));
    }
    Ok(())
}

/// Per-voxel boundary flags without the degeneracy check.
pub(crate) fn boundary_flags(mask: &Mask) -> Vec<bool> {
    let geom = mask.geometry();
    let [nx, ny, nz] = geom.shape;
    let data = mask.data();
    let mut out = vec![false; data.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = geom.index(x, y, z);
                if !data[i] {
                    continue;
                }
                out[i] = NEIGHBOURS.iter().any(|d| {
                    let px = x as isize + d[0];
                    let py = y as isize + d[1];
                    let pz = z as isize + d[2];
                    // Outside the volume is not background.
                    if px < 0
                        || py < 0
                        || pz < 0
                        || px >= nx as isize
                        || py >= ny as isize
                        || pz >= nz as isize
                    {
                        return false;
                    }
                    !data[geom.index(px as usize, py as usize, pz as usize)]
                });
            }
        }
    }
    out
}

/// Linear indices of the foreground voxels that touch background through a
/// face. Volume faces do not make a voxel a boundary voxel.
pub fn extract_boundary(mask: &Mask) -> Result<Vec<usize>> {
    ensure_non_degenerate(mask)?;
    Ok(boundary_flags(mask)
        .iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect())
}

/// Lower envelope of parabolas along one line (Felzenszwalb & Huttenlocher),
/// in physical units. `f` holds squared distances, `INFINITY` for no seed.
fn edt_line(f: &[f64], spacing: f64, out: &mut [f64], v: &mut [usize], zb: &mut [f64]) {
    let n = f.len();
    let pos = |q: usize| q as f64 * spacing;
    let mut k: isize = -1;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                zb[0] = f64::NEG_INFINITY;
                zb[1] = f64::INFINITY;
                break;
            }
            let p = v[k as usize];
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p)))
                / (2.0 * (pos(q) - pos(p)));
            if s <= zb[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            zb[k as usize] = s;
            zb[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        let x = pos(q);
        while zb[j + 1] < x {
            j += 1;
        }
        let d = x - pos(v[j]);
        *o = d * d + f[v[j]];
    }
}

/// Exact squared Euclidean distance (respecting spacing) from every voxel to
/// the nearest seed voxel. Voxels are unreachable (`INFINITY`) only when there
/// are no seeds at all.
pub(crate) fn squared_distance_to_seeds(geom: &Geometry, seeds: &[bool]) -> Vec<f64> {
    let mut dist: Vec<f64> = seeds
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let n_max = *geom.shape.iter().max().unwrap_or(&1);
    let mut line = vec![0.0; n_max];
    let mut out = vec![0.0; n_max];
    let mut v = vec![0usize; n_max];
    let mut zb = vec![0.0; n_max + 1];
    let [nx, ny, nz] = geom.shape;
    for axis in 0..3 {
        let n = geom.shape[axis];
        let s = geom.spacing[axis];
        let (a_len, b_len) = match axis {
            0 => (ny, nz),
            1 => (nx, nz),
            _ => (nx, ny),
        };
        for b in 0..b_len {
            for a in 0..a_len {
                let idx = |t: usize| match axis {
                    0 => geom.index(t, a, b),
                    1 => geom.index(a, t, b),
                    _ => geom.index(a, b, t),
                };
                for t in 0..n {
                    line[t] = dist[idx(t)];
                }
                edt_line(&line[..n], s, &mut out[..n], &mut v[..n], &mut zb[..n + 1]);
                for t in 0..n {
                    dist[idx(t)] = out[t];
                }
            }
        }
    }
    dist
}

/// Signed distance to the nearest boundary voxel centre: negative on interior
/// foreground, zero on the boundary, positive on background.
pub fn compute_sdm(mask: &Mask) -> Result<SignedDistanceMap> {
    ensure_non_degenerate(mask)?;
    let boundary = boundary_flags(mask);
    let sq = squared_distance_to_seeds(mask.geometry(), &boundary);
    let data = mask
        .data()
        .iter()
        .zip(&boundary)
        .zip(&sq)
        .map(|((&fg, &b), &d2)| {
            if b {
                0.0
            } else if fg {
                -d2.sqrt()
            } else {
                d2.sqrt()
            }
        })
        .collect();
    SignedDistanceMap::new(*mask.geometry(), data, false)
}

/// Divides by the largest magnitude so values land in `[-1, 1]`.
pub fn normalize_sdm(sdm: &SignedDistanceMap) -> Result<SignedDistanceMap> {
    if sdm.is_normalized() {
        return Err(DtmlError::NormalizationMismatch(
            "map is already normalized".into(),
        ));
    }
    let max_abs = sdm.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs == 0.0 {
        return Err(DtmlError::DegenerateMap("map is identically zero".into()));
    }
    let data = sdm.data().iter().map(|v| v / max_abs).collect();
    SignedDistanceMap::new(*sdm.geometry(), data, true)
}

/// `1 / (1 + exp(k z))`, saturating to 0 or 1 without overflow.
#[inline]
pub fn soft_mask_value(z: f64, k: f64) -> f64 {
    let t = k * z;
    if t >= 0.0 {
        let e = (-t).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + t.exp())
    }
}

/// Derivative of [`soft_mask_value`] with respect to `z`, given its output
/// `p`.
#[inline]
pub(crate) fn soft_mask_derivative(p: f64, k: f64) -> f64 {
    -k * p * (1.0 - p)
}

/// Smooth inverse of the signed distance transform: foreground (`z < 0`)
/// maps above one half, background below.
pub fn sdm_to_soft_mask(sdm: &SignedDistanceMap, cfg: TransformConfig) -> ProbabilityMap {
    let data = sdm.data().iter().map(|&z| soft_mask_value(z, cfg.k)).collect();
    ProbabilityMap::new(*sdm.geometry(), data).expect("soft mask values lie in (0, 1)")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Geometry;

    fn line_mask(bits: &[u8]) -> Mask {
        let g = Geometry::isotropic([1, 1, bits.len()]).unwrap();
        Mask::from_u8(g, bits).unwrap()
    }

    #[test]
    fn single_voxel_is_its_own_boundary() {
        let m = line_mask(&[0, 0, 1, 0, 0]);
        assert_eq!(extract_boundary(&m).unwrap(), vec![2]);
    }

    #[test]
    fn degenerate_masks_rejected() {
        let g = Geometry::isotropic([3, 3, 3]).unwrap();
        let full = Mask::new(g, vec![true; 27]).unwrap();
        assert!(matches!(
            extract_boundary(&full),
            Err(DtmlError::DegenerateMask(_))
        ));
        assert!(matches!(
            compute_sdm(&Mask::empty(g)),
            Err(DtmlError::DegenerateMask(_))
        ));
    }

    #[test]
    fn centre_row_is_all_boundary() {
        // 3x3x1 with the middle row (y = 1) foreground.
        let g = Geometry::isotropic([3, 3, 1]).unwrap();
        let mut m = Mask::empty(g);
        for x in 0..3 {
            m.set(x, 1, 0, true);
        }
        let b = extract_boundary(&m).unwrap();
        assert_eq!(b, vec![g.index(0, 1, 0), g.index(1, 1, 0), g.index(2, 1, 0)]);
    }

    #[test]
    fn volume_faces_are_not_boundary() {
        // Foreground slab touching the x = 0 face: only the x = 1 layer is boundary.
        let g = Geometry::isotropic([4, 2, 2]).unwrap();
        let mut m = Mask::empty(g);
        for z in 0..2 {
            for y in 0..2 {
                m.set(0, y, z, true);
                m.set(1, y, z, true);
            }
        }
        let b = extract_boundary(&m).unwrap();
        assert_eq!(b.len(), 4);
        assert!(b.iter().all(|&i| g.coords(i)[0] == 1));
    }

    #[test]
    fn line_sdm() {
        let sdm = compute_sdm(&line_mask(&[0, 0, 1, 0, 0])).unwrap();
        assert_eq!(sdm.data(), &[2.0, 1.0, 0.0, 1.0, 2.0]);
        assert!(!sdm.is_normalized());
    }

    #[test]
    fn interior_is_negative() {
        let sdm = compute_sdm(&line_mask(&[0, 1, 1, 1, 1, 1, 0])).unwrap();
        assert_eq!(sdm.data(), &[1.0, 0.0, -1.0, -2.0, -1.0, 0.0, 1.0]);
    }

    #[test]
    fn anisotropic_spacing_scales_distances() {
        let g = Geometry::new([1, 1, 5], [1.0, 1.0, 0.625]).unwrap();
        let m = Mask::from_u8(g, &[0, 0, 1, 0, 0]).unwrap();
        let sdm = compute_sdm(&m).unwrap();
        assert_eq!(sdm.data(), &[1.25, 0.625, 0.0, 0.625, 1.25]);
    }

    #[test]
    fn normalize_divides_by_max_abs() {
        let sdm = compute_sdm(&line_mask(&[0, 0, 1, 0, 0])).unwrap();
        let n = normalize_sdm(&sdm).unwrap();
        assert_eq!(n.data(), &[1.0, 0.5, 0.0, 0.5, 1.0]);
        assert!(n.is_normalized());
        assert!(matches!(
            normalize_sdm(&n),
            Err(DtmlError::NormalizationMismatch(_))
        ));
    }

    #[test]
    fn normalize_rejects_zero_map() {
        let g = Geometry::isotropic([2, 2, 2]).unwrap();
        let z = SignedDistanceMap::new(g, vec![0.0; 8], false).unwrap();
        assert!(matches!(normalize_sdm(&z), Err(DtmlError::DegenerateMap(_))));
    }

    #[test]
    fn soft_mask_values() {
        assert_eq!(soft_mask_value(0.0, 7.0), 0.5);
        assert!((soft_mask_value(-0.2, 10.0) - 0.880797).abs() < 1e-6);
        // Saturates without NaN or infinity.
        let hi = soft_mask_value(-1e6, 1500.0);
        let lo = soft_mask_value(1e6, 1500.0);
        assert_eq!((hi, lo), (1.0, 0.0));
    }

    #[test]
    fn steep_transform_approaches_indicator() {
        for &z in &[-1.0, -0.5, -0.0101, 0.0101, 0.3, 1.0] {
            let p = soft_mask_value(z, 1000.0);
            let hard = if z < 0.0 { 1.0 } else { 0.0 };
            assert!((p - hard).abs() < 0.01, "z = {z}: {p}");
        }
    }

    #[test]
    fn rejects_bad_k() {
        assert!(TransformConfig::new(0.0).is_err());
        assert!(TransformConfig::new(f64::INFINITY).is_err());
        assert!(TransformConfig::new(-3.0).is_err());
    }
}
