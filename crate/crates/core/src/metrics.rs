//! Region overlap (Dice, Jaccard) and boundary distance (ASD, 95HD) metrics.

use serde::{Deserialize, Serialize};

use crate::error::{DtmlError, Result};
use crate::grid::Mask;
use crate::sdm::{boundary_flags, squared_distance_to_seeds};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice: f64,
    pub jaccard: f64,
    pub asd: f64,
    pub hd95: f64,
}

impl MetricsReport {
    pub fn evaluate(pred: &Mask, gt: &Mask) -> Result<Self> {
        let (a, b) = surface_distances(pred, gt)?;
        let pooled = pooled(&a, &b);
        Ok(Self {
            dice: dice(pred, gt)?,
            jaccard: jaccard(pred, gt)?,
            asd: mean(&pooled),
            hd95: percentile(&pooled, 95.0),
        })
    }
}

fn overlap_counts(pred: &Mask, gt: &Mask) -> Result<(usize, usize, usize)> {
    pred.geometry().ensure_matches(gt.geometry())?;
    let mut inter = 0;
    let mut p = 0;
    let mut g = 0;
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        p += usize::from(a);
        g += usize::from(b);
        inter += usize::from(a && b);
    }
    Ok((inter, p, g))
}

/// `2|P∩G| / (|P| + |G|)`, 1 when both masks are empty.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (inter, p, g) = overlap_counts(pred, gt)?;
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// `|P∩G| / |P∪G|`, 1 when both masks are empty.
pub fn jaccard(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (inter, p, g) = overlap_counts(pred, gt)?;
    let union = p + g - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

fn directed(from: &[bool], to_sq: &[f64]) -> Vec<f64> {
    from.iter()
        .zip(to_sq)
        .filter_map(|(&b, &d2)| b.then(|| d2.sqrt()))
        .collect()
}

/// For every boundary voxel of `pred`, the distance to the nearest boundary
/// voxel of `gt`, and the same in the other direction. Boundaries follow the
/// signed-distance definition; distances are in physical units.
pub fn surface_distances(pred: &Mask, gt: &Mask) -> Result<(Vec<f64>, Vec<f64>)> {
    pred.geometry().ensure_matches(gt.geometry())?;
    for (name, m) in [("prediction", pred), ("ground truth", gt)] {
        if m.is_degenerate() {
            return Err(DtmlError::DegenerateMask(format!(
                "{name} has no boundary"
            )));
        }
    }
    let bp = boundary_flags(pred);
    let bg = boundary_flags(gt);
    let geom = pred.geometry();
    let to_gt = squared_distance_to_seeds(geom, &bg);
    let to_pred = squared_distance_to_seeds(geom, &bp);
    Ok((directed(&bp, &to_gt), directed(&bg, &to_pred)))
}

fn pooled(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).copied().collect()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Percentile with linear interpolation between closest ranks
/// (rank = q/100 · (n − 1)).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty list");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Mean of the pooled symmetric surface distances.
pub fn asd(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (a, b) = surface_distances(pred, gt)?;
    Ok(mean(&pooled(&a, &b)))
}

/// 95th percentile of the pooled symmetric surface distances.
pub fn hd95(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (a, b) = surface_distances(pred, gt)?;
    Ok(percentile(&pooled(&a, &b), 95.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Geometry;

    fn mask_from(shape: [usize; 3], on: &[usize]) -> Mask {
        let g = Geometry::isotropic(shape).unwrap();
        let mut data = vec![false; g.len()];
        for &i in on {
            data[i] = true;
        }
        Mask::new(g, data).unwrap()
    }

    #[test]
    fn dice_and_jaccard_by_counting() {
        // |P| = 4, |G| = 6, |P∩G| = 3, |P∪G| = 7.
        let p = mask_from([10, 1, 1], &[0, 1, 2, 9]);
        let g = mask_from([10, 1, 1], &[0, 1, 2, 3, 4, 5]);
        assert!((dice(&p, &g).unwrap() - 0.6).abs() < 1e-12);
        assert!((jaccard(&p, &g).unwrap() - 3.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn empty_and_disjoint_cases() {
        let e = mask_from([4, 1, 1], &[]);
        let a = mask_from([4, 1, 1], &[0]);
        let b = mask_from([4, 1, 1], &[3]);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(jaccard(&e, &e).unwrap(), 1.0);
        assert_eq!(dice(&e, &a).unwrap(), 0.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        assert!(matches!(asd(&e, &a), Err(DtmlError::DegenerateMask(_))));
        assert!(matches!(hd95(&a, &e), Err(DtmlError::DegenerateMask(_))));
    }

    #[test]
    fn shape_mismatch() {
        let a = mask_from([4, 1, 1], &[0]);
        let b = mask_from([1, 4, 1], &[0]);
        assert!(matches!(dice(&a, &b), Err(DtmlError::ShapeMismatch { .. })));
    }

    #[test]
    fn single_voxels_three_apart() {
        let p = mask_from([7, 1, 1], &[1]);
        let g = mask_from([7, 1, 1], &[4]);
        let (a, b) = surface_distances(&p, &g).unwrap();
        assert_eq!(a, vec![3.0]);
        assert_eq!(b, vec![3.0]);
        assert_eq!(asd(&p, &g).unwrap(), 3.0);
        assert_eq!(hd95(&p, &g).unwrap(), 3.0);
    }

    #[test]
    fn identical_masks_are_ideal() {
        let m = mask_from([5, 5, 1], &[6, 7, 8, 11, 12, 13]);
        let r = MetricsReport::evaluate(&m, &m).unwrap();
        assert_eq!((r.dice, r.jaccard, r.asd, r.hd95), (1.0, 1.0, 0.0, 0.0));
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![0.0; 19];
        v.push(10.0);
        assert!((percentile(&v, 95.0) - 0.5).abs() < 1e-12);
        assert_eq!(percentile(&[4.0], 95.0), 4.0);
        assert_eq!(percentile(&[1.0, 2.0, 3.0], 50.0), 2.0);
    }
}
