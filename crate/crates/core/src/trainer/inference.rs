//! Sliding-window inference over whole volumes and per-case evaluation.

use crate::data::LabeledCase;
use crate::error::{DtmlError, Result};
use crate::grid::{binarize, Geometry, Mask, ProbabilityMap, Shape3, SignedDistanceMap, Volume};
use crate::metrics::MetricsReport;
use crate::nn::{forward_with, Backbone, Head, NetworkParams};
use crate::sdm::{sdm_to_soft_mask, TransformConfig};

/// A full-volume output of either head.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Seg(ProbabilityMap),
    Dis(SignedDistanceMap),
}

impl Prediction {
    pub fn data(&self) -> &[f64] {
        match self {
            Prediction::Seg(p) => p.data(),
            Prediction::Dis(z) => z.data(),
        }
    }

    /// Foreground probabilities; distances pass through the soft mask.
    pub fn probabilities(&self, cfg: TransformConfig) -> ProbabilityMap {
        match self {
            Prediction::Seg(p) => p.clone(),
            Prediction::Dis(z) => sdm_to_soft_mask(z, cfg),
        }
    }

    pub fn to_mask(&self, threshold: f64, cfg: TransformConfig) -> Result<Mask> {
        binarize(&self.probabilities(cfg), threshold)
    }
}

/// Window origins along one axis: every `stride`, with a last window flush
/// against the far edge.
pub fn window_starts(len: usize, crop: usize, stride: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..=len - crop).step_by(stride).collect();
    if *starts.last().expect("at least one start") != len - crop {
        starts.push(len - crop);
    }
    starts
}

/// Number of windows covering each voxel.
pub fn window_coverage(shape: Shape3, crop: Shape3, stride: Shape3) -> Vec<u32> {
    let geom = Geometry::isotropic(shape).expect("positive shape");
    let starts = [0, 1, 2].map(|k| window_starts(shape[k], crop[k], stride[k]));
    let mut count = vec![0u32; geom.len()];
    for &oz in &starts[2] {
        for &oy in &starts[1] {
            for &ox in &starts[0] {
                for z in oz..oz + crop[2] {
                    for y in oy..oy + crop[1] {
                        let row = geom.index(ox, y, z);
                        count[row..row + crop[0]].iter_mut().for_each(|c| *c += 1);
                    }
                }
            }
        }
    }
    count
}

fn check_windows(shape: Shape3, crop: Shape3, stride: Shape3) -> Result<()> {
    if (0..3).any(|k| crop[k] == 0 || crop[k] > shape[k]) {
        return Err(DtmlError::CropTooLarge { crop, volume: shape });
    }
    if (0..3).any(|k| stride[k] == 0 || stride[k] > crop[k]) {
        return Err(DtmlError::InvalidConfig(format!(
            "stride {stride:?} must be positive and at most the window {crop:?}"
        )));
    }
    Ok(())
}

/// Tiles `v` with overlapping windows of `crop`, runs `head` on each and
/// averages overlapping outputs per voxel.
pub fn sliding_window_predict(
    params: &NetworkParams,
    v: &Volume,
    crop: Shape3,
    stride: Shape3,
    head: Head,
) -> Result<Prediction> {
    let backbone = Backbone::new(params.descriptor)?;
    sliding_window_with(&backbone, params, v, crop, stride, head)
}

pub(crate) fn sliding_window_with(
    backbone: &Backbone,
    params: &NetworkParams,
    v: &Volume,
    crop: Shape3,
    stride: Shape3,
    head: Head,
) -> Result<Prediction> {
    let shape = v.shape();
    check_windows(shape, crop, stride)?;
    let geom = *v.geometry();
    let starts = [0, 1, 2].map(|k| window_starts(shape[k], crop[k], stride[k]));
    let mut sum = vec![0.0; geom.len()];
    let mut count = vec![0u32; geom.len()];
    for &oz in &starts[2] {
        for &oy in &starts[1] {
            for &ox in &starts[0] {
                let (window, _) = crate::data::crop_at(v, None, [ox, oy, oz], crop)?;
                let out = forward_with(backbone, params, &window, head)?;
                let mut j = 0;
                for z in oz..oz + crop[2] {
                    for y in oy..oy + crop[1] {
                        let row = geom.index(ox, y, z);
                        for i in row..row + crop[0] {
                            sum[i] += out[j];
                            count[i] += 1;
                            j += 1;
                        }
                    }
                }
            }
        }
    }
    let data: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
    Ok(match head {
        Head::Seg => Prediction::Seg(ProbabilityMap::new(geom, data)?),
        Head::Dis => Prediction::Dis(SignedDistanceMap::new(geom, data, true)?),
    })
}

/// Metrics for one case. A prediction with no boundary (empty or full) gets
/// its region scores as usual and surface distances equal to the physical
/// diagonal of the volume.
pub fn evaluate_mask(pred: &Mask, gt: &Mask) -> Result<MetricsReport> {
    if pred.is_degenerate() {
        let g = pred.geometry();
        let diag = (0..3)
            .map(|k| (g.shape[k] as f64 * g.spacing[k]).powi(2))
            .sum::<f64>()
            .sqrt();
        return Ok(MetricsReport {
            dice: crate::metrics::dice(pred, gt)?,
            jaccard: crate::metrics::jaccard(pred, gt)?,
            asd: diag,
            hd95: diag,
        });
    }
    MetricsReport::evaluate(pred, gt)
}

/// Settings for turning a network into masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceSettings {
    pub crop: Shape3,
    pub stride: Shape3,
    pub threshold: f64,
    pub transform: TransformConfig,
}

/// Standardizes each volume, predicts with `head`, binarizes and scores.
pub fn evaluate_cases(
    params: &NetworkParams,
    head: Head,
    cases: &[LabeledCase],
    settings: &InferenceSettings,
) -> Result<Vec<MetricsReport>> {
    let backbone = Backbone::new(params.descriptor)?;
    cases
        .iter()
        .map(|c| {
            let pred = sliding_window_with(
                &backbone,
                params,
                &c.volume.standardized(),
                settings.crop,
                settings.stride,
                head,
            )?;
            evaluate_mask(&pred.to_mask(settings.threshold, settings.transform)?, &c.mask)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_backbone, forward_head, ArchDescriptor};

    fn small() -> NetworkParams {
        build_backbone(
            ArchDescriptor {
                levels: 2,
                base_width: 4,
                ..Default::default()
            },
            3,
        )
        .unwrap()
    }

    fn noise(shape: Shape3) -> Volume {
        let g = Geometry::isotropic(shape).unwrap();
        Volume::new(g, (0..g.len()).map(|i| ((i * 7919) % 13) as f64 / 6.0 - 1.0).collect())
            .unwrap()
    }

    #[test]
    fn starts_cover_the_axis() {
        assert_eq!(window_starts(10, 4, 3), vec![0, 3, 6]);
        assert_eq!(window_starts(10, 4, 4), vec![0, 4, 6]);
        assert_eq!(window_starts(4, 4, 2), vec![0]);
    }

    #[test]
    fn single_window_equals_direct_forward() {
        let p = small();
        let v = noise([8, 8, 8]);
        let pred = sliding_window_predict(&p, &v, [8, 8, 8], [4, 4, 4], Head::Seg).unwrap();
        assert_eq!(pred.data(), forward_head(&p, &v, Head::Seg).unwrap().as_slice());
    }

    #[test]
    fn constant_network_gives_constant_map() {
        let mut p = small();
        for t in &mut p.tensors {
            if t.name == "head.weight" {
                t.data.iter_mut().for_each(|w| *w = 0.0);
            }
            if t.name == "head.bias" {
                t.data[0] = 0.3;
            }
        }
        let v = noise([12, 16, 8]);
        for stride in [[4, 4, 4], [2, 3, 1]] {
            let pred = sliding_window_predict(&p, &v, [8, 8, 8], stride, Head::Dis).unwrap();
            let want = 0.3f64.tanh();
            assert!(pred.data().iter().all(|&x| (x - want).abs() < 1e-12));
        }
    }

    #[test]
    fn oversized_window_rejected() {
        let p = small();
        let v = noise([8, 8, 4]);
        assert!(matches!(
            sliding_window_predict(&p, &v, [8, 8, 8], [4, 4, 4], Head::Seg),
            Err(DtmlError::CropTooLarge { .. })
        ));
    }

    #[test]
    fn empty_prediction_scores_diagonal() {
        let g = Geometry::isotropic([3, 4, 12]).unwrap();
        let mut gt = Mask::empty(g);
        gt.set(1, 1, 1, true);
        let r = evaluate_mask(&Mask::empty(g), &gt).unwrap();
        assert_eq!(r.dice, 0.0);
        assert_eq!(r.asd, 13.0);
    }
}
