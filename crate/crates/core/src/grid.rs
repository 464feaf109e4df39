//! Dense 3D grids with physical voxel spacing.
//!
//! Every grid is stored x-fastest: the voxel `(x, y, z)` of a grid with shape
//! `[nx, ny, nz]` lives at linear index `x + nx * (y + ny * z)`.

use serde::{Deserialize, Serialize};

use crate::error::{DtmlError, Result};

pub type Shape3 = [usize; 3];
pub type Spacing3 = [f64; 3];

/// Shape and voxel spacing (millimetres) shared by every grid type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub shape: Shape3,
    pub spacing: Spacing3,
}

impl Geometry {
    pub fn new(shape: Shape3, spacing: Spacing3) -> Result<Self> {
        if shape.iter().any(|&n| n == 0) {
            return Err(DtmlError::InvalidShape(format!(
                "every axis must be positive, got {shape:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(DtmlError::InvalidShape(format!(
                "spacing must be finite and positive, got {spacing:?}"
            )));
        }
        Ok(Self { shape, spacing })
    }

    /// Unit spacing.
    pub fn isotropic(shape: Shape3) -> Result<Self> {
        Self::new(shape, [1.0; 3])
    }

    pub fn len(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let nx = self.shape[0];
        let ny = self.shape[1];
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    pub(crate) fn ensure_same_shape(&self, other: &Geometry) -> Result<()> {
        if self.shape != other.shape {
            return Err(DtmlError::ShapeMismatch {
                expected: self.shape,
                actual: other.shape,
            });
        }
        Ok(())
    }

    /// Same shape and same spacing.
    pub(crate) fn ensure_matches(&self, other: &Geometry) -> Result<()> {
        self.ensure_same_shape(other)?;
        if self.spacing != other.spacing {
            return Err(DtmlError::InvalidShape(format!(
                "spacing mismatch: {:?} vs {:?}",
                self.spacing, other.spacing
            )));
        }
        Ok(())
    }

    /// Physical distance between two voxel centres.
    pub fn distance(&self, a: [usize; 3], b: [usize; 3]) -> f64 {
        (0..3)
            .map(|k| {
                let d = (a[k] as f64 - b[k] as f64) * self.spacing[k];
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

fn check_len(geom: &Geometry, len: usize) -> Result<()> {
    if geom.len() != len {
        return Err(DtmlError::InvalidShape(format!(
            "shape {:?} holds {} voxels but data has {}",
            geom.shape,
            geom.len(),
            len
        )));
    }
    Ok(())
}

/// Scalar intensity volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    geom: Geometry,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(geom: Geometry, data: Vec<f64>) -> Result<Self> {
        check_len(&geom, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DtmlError::InvalidShape(
                "volume contains non-finite intensities".into(),
            ));
        }
        Ok(Self { geom, data })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn shape(&self) -> Shape3 {
        self.geom.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Zero mean, unit variance copy. A constant volume maps to all zeros.
    pub fn standardized(&self) -> Volume {
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        let var = self.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        let data = if std > 1e-12 {
            self.data.iter().map(|v| (v - mean) / std).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Volume {
            geom: self.geom,
            data,
        }
    }
}

/// Binary foreground mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    geom: Geometry,
    data: Vec<bool>,
}

// Geometry holds f64 spacing; masks compare spacing bitwise so Eq is sound.
impl Eq for Geometry {}

impl Mask {
    pub fn new(geom: Geometry, data: Vec<bool>) -> Result<Self> {
        check_len(&geom, data.len())?;
        Ok(Self { geom, data })
    }

    /// Builds a mask from 0/1 bytes; any other byte value is rejected.
    pub fn from_u8(geom: Geometry, bytes: &[u8]) -> Result<Self> {
        check_len(&geom, bytes.len())?;
        let data = bytes
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(DtmlError::InvalidShape(format!(
                    "mask voxel value {other} is not binary"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { geom, data })
    }

    pub fn empty(geom: Geometry) -> Self {
        Self {
            data: vec![false; geom.len()],
            geom,
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn shape(&self) -> Shape3 {
        self.geom.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.geom.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        let i = self.geom.index(x, y, z);
        self.data[i] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    /// True when the mask has no foreground or no background.
    pub fn is_degenerate(&self) -> bool {
        let n = self.count();
        n == 0 || n == self.data.len()
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| u8::from(v)).collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }
}

/// Signed Euclidean distance to the object boundary: negative inside, zero on
/// the boundary, positive outside.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedDistanceMap {
    geom: Geometry,
    data: Vec<f64>,
    normalized: bool,
}

impl SignedDistanceMap {
    pub fn new(geom: Geometry, data: Vec<f64>, normalized: bool) -> Result<Self> {
        check_len(&geom, data.len())?;
        if normalized && data.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(DtmlError::NormalizationMismatch(
                "normalized map has values outside [-1, 1]".into(),
            ));
        }
        Ok(Self {
            geom,
            data,
            normalized,
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn shape(&self) -> Shape3 {
        self.geom.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// Per-voxel foreground probability in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    geom: Geometry,
    data: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(geom: Geometry, data: Vec<f64>) -> Result<Self> {
        check_len(&geom, data.len())?;
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DtmlError::InvalidShape(
                "probabilities must lie in [0, 1]".into(),
            ));
        }
        Ok(Self { geom, data })
    }

    /// Lossless view of a mask as a hard probability map.
    pub fn from_mask(mask: &Mask) -> Self {
        Self {
            geom: *mask.geometry(),
            data: mask.to_f64(),
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn shape(&self) -> Shape3 {
        self.geom.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// Voxelwise `p >= threshold`; ties go to foreground.
pub fn binarize(p: &ProbabilityMap, threshold: f64) -> Result<Mask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(DtmlError::InvalidConfig(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    Mask::new(
        p.geom,
        p.data.iter().map(|&v| v >= threshold).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_roundtrip() {
        let g = Geometry::isotropic([3, 4, 5]).unwrap();
        for i in 0..g.len() {
            let [x, y, z] = g.coords(i);
            assert_eq!(g.index(x, y, z), i);
        }
        assert_eq!(g.index(1, 0, 0), 1);
        assert_eq!(g.index(0, 1, 0), 3);
        assert_eq!(g.index(0, 0, 1), 12);
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(Geometry::new([0, 1, 1], [1.0; 3]).is_err());
        assert!(Geometry::new([1, 1, 1], [1.0, 0.0, 1.0]).is_err());
        assert!(Geometry::new([1, 1, 1], [1.0, f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn mask_rejects_non_binary_bytes() {
        let g = Geometry::isotropic([2, 1, 1]).unwrap();
        assert!(Mask::from_u8(g, &[0, 1]).is_ok());
        assert!(Mask::from_u8(g, &[0, 2]).is_err());
    }

    #[test]
    fn binarize_tie_goes_to_foreground() {
        let g = Geometry::isotropic([3, 1, 1]).unwrap();
        let p = ProbabilityMap::new(g, vec![0.5, 0.6, 0.4]).unwrap();
        let m = binarize(&p, 0.5).unwrap();
        assert_eq!(m.data(), &[true, true, false]);
        assert!(binarize(&p, 1.0).is_err());
    }

    #[test]
    fn binarize_all_above() {
        let g = Geometry::isotropic([4, 4, 4]).unwrap();
        let p = ProbabilityMap::new(g, vec![0.6; 64]).unwrap();
        assert_eq!(binarize(&p, 0.5).unwrap().count(), 64);
    }

    #[test]
    fn standardized_has_zero_mean_unit_variance() {
        let g = Geometry::isotropic([5, 1, 1]).unwrap();
        let v = Volume::new(g, vec![1.0, 2.0, 3.0, 4.0, 10.0]).unwrap();
        let s = v.standardized();
        let mean: f64 = s.data().iter().sum::<f64>() / 5.0;
        let var: f64 = s.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
    }
}
