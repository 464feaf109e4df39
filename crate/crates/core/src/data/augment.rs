//! Random crops and the flip / axial-rotation augmentation.

use rand::Rng;

use crate::error::{DtmlError, Result};
use crate::grid::{Geometry, Mask, ProbabilityMap, Shape3, SignedDistanceMap, Volume};

fn crop_data<T: Copy>(geom: &Geometry, data: &[T], offset: Shape3, crop: Shape3) -> Vec<T> {
    let mut out = Vec::with_capacity(crop[0] * crop[1] * crop[2]);
    for z in 0..crop[2] {
        for y in 0..crop[1] {
            let start = geom.index(offset[0], offset[1] + y, offset[2] + z);
            out.extend_from_slice(&data[start..start + crop[0]]);
        }
    }
    out
}

fn check_crop(volume: Shape3, crop: Shape3) -> Result<()> {
    if crop.iter().zip(&volume).any(|(&c, &v)| c == 0 || c > v) {
        return Err(DtmlError::CropTooLarge { crop, volume });
    }
    Ok(())
}

/// Axis-aligned crop at `offset`.
pub fn crop_at(
    v: &Volume,
    m: Option<&Mask>,
    offset: Shape3,
    crop: Shape3,
) -> Result<(Volume, Option<Mask>)> {
    let geom = v.geometry();
    check_crop(geom.shape, crop)?;
    if (0..3).any(|k| offset[k] + crop[k] > geom.shape[k]) {
        return Err(DtmlError::CropTooLarge {
            crop: [0, 1, 2].map(|k| offset[k] + crop[k]),
            volume: geom.shape,
        });
    }
    if let Some(m) = m {
        geom.ensure_same_shape(m.geometry())?;
    }
    let cg = Geometry::new(crop, geom.spacing)?;
    let cv = Volume::new(cg, crop_data(geom, v.data(), offset, crop))?;
    let cm = m
        .map(|m| Mask::new(cg, crop_data(geom, m.data(), offset, crop)))
        .transpose()?;
    Ok((cv, cm))
}

/// Crop at a uniformly random valid offset; volume and mask share it.
pub fn random_crop<R: Rng + ?Sized>(
    v: &Volume,
    m: Option<&Mask>,
    crop: Shape3,
    rng: &mut R,
) -> Result<(Volume, Option<Mask>)> {
    let shape = v.shape();
    check_crop(shape, crop)?;
    let offset = [0, 1, 2].map(|k| rng.gen_range(0..=shape[k] - crop[k]));
    crop_at(v, m, offset, crop)
}

/// Independent flips of each axis followed by `quarter_turns` 90° rotations
/// in the axial (x-y) plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augmentation {
    pub flips: [bool; 3],
    pub quarter_turns: u8,
}

impl Augmentation {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let flips = [rng.gen_bool(0.5), rng.gen_bool(0.5), rng.gen_bool(0.5)];
        Self {
            flips,
            quarter_turns: rng.gen_range(0..4),
        }
    }

    pub fn output_geometry(&self, geom: &Geometry) -> Geometry {
        let mut g = *geom;
        if self.quarter_turns % 2 == 1 {
            g.shape.swap(0, 1);
            g.spacing.swap(0, 1);
        }
        g
    }

    /// Permutes voxel data laid out on `geom`.
    pub fn apply_data<T: Copy>(&self, geom: &Geometry, data: &[T]) -> (Geometry, Vec<T>) {
        let mut g = *geom;
        let mut cur = data.to_vec();
        if self.flips.iter().any(|&f| f) {
            let [nx, ny, nz] = g.shape;
            let mut out = Vec::with_capacity(cur.len());
            for z in 0..nz {
                let sz = if self.flips[2] { nz - 1 - z } else { z };
                for y in 0..ny {
                    let sy = if self.flips[1] { ny - 1 - y } else { y };
                    for x in 0..nx {
                        let sx = if self.flips[0] { nx - 1 - x } else { x };
                        out.push(cur[g.index(sx, sy, sz)]);
                    }
                }
            }
            cur = out;
        }
        for _ in 0..self.quarter_turns % 4 {
            let (ng, out) = rotate_quarter(&g, &cur);
            g = ng;
            cur = out;
        }
        (g, cur)
    }

    pub fn apply_volume(&self, v: &Volume) -> Volume {
        let (g, d) = self.apply_data(v.geometry(), v.data());
        Volume::new(g, d).expect("permutation keeps values finite")
    }

    pub fn apply_mask(&self, m: &Mask) -> Mask {
        let (g, d) = self.apply_data(m.geometry(), m.data());
        Mask::new(g, d).expect("permutation keeps size")
    }

    pub fn apply_sdm(&self, s: &SignedDistanceMap) -> SignedDistanceMap {
        let (g, d) = self.apply_data(s.geometry(), s.data());
        SignedDistanceMap::new(g, d, s.is_normalized()).expect("permutation keeps range")
    }

    pub fn apply_probabilities(&self, p: &ProbabilityMap) -> ProbabilityMap {
        let (g, d) = self.apply_data(p.geometry(), p.data());
        ProbabilityMap::new(g, d).expect("permutation keeps range")
    }
}

/// One 90° turn in the x-y plane: `new(x', y', z) = old(y', ny − 1 − x', z)`.
fn rotate_quarter<T: Copy>(geom: &Geometry, data: &[T]) -> (Geometry, Vec<T>) {
    let [nx, ny, nz] = geom.shape;
    let mut g = *geom;
    g.shape = [ny, nx, nz];
    g.spacing.swap(0, 1);
    let mut out = Vec::with_capacity(data.len());
    for z in 0..nz {
        for y2 in 0..nx {
            for x2 in 0..ny {
                out.push(data[geom.index(y2, ny - 1 - x2, z)]);
            }
        }
    }
    (g, out)
}

/// Draws one [`Augmentation`] and applies it to the volume and mask alike.
pub fn augment<R: Rng + ?Sized>(
    v: &Volume,
    m: Option<&Mask>,
    rng: &mut R,
) -> (Volume, Option<Mask>) {
    let a = Augmentation::random(rng);
    (a.apply_volume(v), m.map(|m| a.apply_mask(m)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(shape: Shape3) -> Volume {
        let g = Geometry::new(shape, [1.0, 2.0, 3.0]).unwrap();
        Volume::new(g, (0..g.len()).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn full_crop_is_identity() {
        let v = ramp([4, 5, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (c, m) = random_crop(&v, None, [4, 5, 6], &mut rng).unwrap();
        assert_eq!(c, v);
        assert!(m.is_none());
    }

    #[test]
    fn crop_too_large() {
        let v = ramp([4, 5, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            random_crop(&v, None, [5, 5, 5], &mut rng),
            Err(DtmlError::CropTooLarge { .. })
        ));
    }

    #[test]
    fn crop_offsets_cover_all_positions() {
        let v = ramp([6, 5, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..10_000 {
            let (c, _) = random_crop(&v, None, [3, 3, 3], &mut rng).unwrap();
            let first = c.data()[0] as usize;
            seen.insert(v.geometry().coords(first));
        }
        // 4 × 3 × 2 valid offsets.
        assert_eq!(seen.len(), 24);
    }

    #[test]
    fn mask_and_volume_share_offset() {
        let v = ramp([6, 6, 6]);
        let g = *v.geometry();
        let m = Mask::new(g, (0..g.len()).map(|i| i % 7 == 0).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (c, cm) = random_crop(&v, Some(&m), [2, 3, 4], &mut rng).unwrap();
        let cm = cm.unwrap();
        for (val, &fg) in c.data().iter().zip(cm.data()) {
            assert_eq!((*val as usize) % 7 == 0, fg);
        }
    }

    #[test]
    fn identity_augmentation() {
        let v = ramp([3, 4, 5]);
        assert_eq!(Augmentation::identity().apply_volume(&v), v);
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let v = ramp([3, 4, 5]);
        let turn = Augmentation {
            flips: [false; 3],
            quarter_turns: 1,
        };
        let once = turn.apply_volume(&v);
        assert_eq!(once.shape(), [4, 3, 5]);
        assert_eq!(once.geometry().spacing, [2.0, 1.0, 3.0]);
        let mut cur = v.clone();
        for _ in 0..4 {
            cur = turn.apply_volume(&cur);
        }
        assert_eq!(cur, v);
    }

    #[test]
    fn quarter_turn_moves_voxels_as_documented() {
        let v = ramp([3, 4, 1]);
        let r = Augmentation {
            flips: [false; 3],
            quarter_turns: 1,
        }
        .apply_volume(&v);
        let g = v.geometry();
        let rg = r.geometry();
        for y2 in 0..3 {
            for x2 in 0..4 {
                assert_eq!(r.data()[rg.index(x2, y2, 0)], v.data()[g.index(y2, 3 - x2, 0)]);
            }
        }
    }

    #[test]
    fn shared_stream_gives_same_transform() {
        let v = ramp([4, 4, 4]);
        let g = *v.geometry();
        let m = Mask::new(g, (0..g.len()).map(|i| i % 3 == 0).collect()).unwrap();
        let (_, a) = augment(&v, Some(&m), &mut ChaCha8Rng::seed_from_u64(8));
        let (_, b) = augment(&v, Some(&m), &mut ChaCha8Rng::seed_from_u64(8));
        assert_eq!(a, b);
        assert_eq!(a.unwrap().count(), m.count());
    }
}
