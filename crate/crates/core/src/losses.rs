//! Supervised losses, the cross-task consistency loss and the consistency
//! weight ramp-up.
//!
//! Every loss has a `*_with_grad` form returning the value together with its
//! gradient with respect to each differentiable input map, which the trainer
//! chains through the head activations.

use serde::{Deserialize, Serialize};

use crate::error::{DtmlError, Result};
use crate::grid::{Mask, ProbabilityMap, SignedDistanceMap};
use crate::sdm::{soft_mask_value, TransformConfig};

/// Probabilities are clamped to `[BCE_EPS, 1 − BCE_EPS]` inside the
/// cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Additive smoothing in the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;

/// `λ(t) = max_weight · exp(−5 (1 − min(t, T)/T)^p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RampUpSchedule {
    pub max_weight: f64,
    pub ramp_length: usize,
    /// `p = 2` when set, `p = 1` otherwise.
    pub exponent_squared: bool,
}

impl RampUpSchedule {
    pub fn new(max_weight: f64, ramp_length: usize) -> Self {
        Self {
            max_weight,
            ramp_length,
            exponent_squared: false,
        }
    }

    pub fn weight(&self, t: usize) -> f64 {
        lambda_con(t, self)
    }
}

pub fn lambda_con(t: usize, schedule: &RampUpSchedule) -> f64 {
    if schedule.ramp_length == 0 || t >= schedule.ramp_length {
        return schedule.max_weight;
    }
    let phase = 1.0 - t as f64 / schedule.ramp_length as f64;
    let shaped = if schedule.exponent_squared {
        phase * phase
    } else {
        phase
    };
    schedule.max_weight * (-5.0 * shaped).exp()
}

/// Per-iteration loss values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_seg: f64,
    pub l_mask: f64,
    pub l_dis: f64,
    pub l_con: f64,
    pub lambda_con: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.l_seg, self.l_mask, self.l_dis, self.l_con, self.lambda_con]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Loss value plus its gradient with respect to one input map.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn ensure_len(expected: [usize; 3], actual: [usize; 3]) -> Result<()> {
    if expected != actual {
        return Err(DtmlError::ShapeMismatch { expected, actual });
    }
    Ok(())
}

fn ensure_normalized(sdm: &SignedDistanceMap, what: &str) -> Result<()> {
    if !sdm.is_normalized() {
        return Err(DtmlError::NormalizationMismatch(format!(
            "{what} must be a normalized signed distance map"
        )));
    }
    Ok(())
}

/// `1 − (2Σpg + s)/(Σp + Σg + s)` and its gradient in `p`.
pub(crate) fn soft_dice_loss(p: &[f64], g: &[f64]) -> LossGrad {
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&a, &b) in p.iter().zip(g) {
        inter += a * b;
        sp += a;
        sg += b;
    }
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = sp + sg + DICE_SMOOTH;
    let grad = g
        .iter()
        .map(|&b| -(2.0 * b * den - num) / (den * den))
        .collect();
    LossGrad {
        value: 1.0 - num / den,
        grad,
    }
}

/// Voxel-mean binary cross-entropy with clamped probabilities.
pub(crate) fn bce_loss(p: &[f64], g: &[f64]) -> LossGrad {
    let n = p.len() as f64;
    let mut value = 0.0;
    let grad = p
        .iter()
        .zip(g)
        .map(|(&a, &b)| {
            let c = a.clamp(BCE_EPS, 1.0 - BCE_EPS);
            value -= b * c.ln() + (1.0 - b) * (1.0 - c).ln();
            if a <= BCE_EPS || a >= 1.0 - BCE_EPS {
                0.0
            } else {
                -(b / c - (1.0 - b) / (1.0 - c)) / n
            }
        })
        .collect();
    LossGrad {
        value: value / n,
        grad,
    }
}

/// Equal-weight soft Dice plus cross-entropy on raw slices.
pub(crate) fn seg_loss_slices(p: &[f64], g: &[f64]) -> LossGrad {
    let d = soft_dice_loss(p, g);
    let c = bce_loss(p, g);
    LossGrad {
        value: 0.5 * d.value + 0.5 * c.value,
        grad: d
            .grad
            .iter()
            .zip(&c.grad)
            .map(|(a, b)| 0.5 * a + 0.5 * b)
            .collect(),
    }
}

pub(crate) fn mse_slices(a: &[f64], b: &[f64]) -> LossGrad {
    let n = a.len() as f64;
    let mut value = 0.0;
    let grad = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            value += d * d;
            2.0 * d / n
        })
        .collect();
    LossGrad {
        value: value / n,
        grad,
    }
}

/// Soft masks of signed distances and `dq/dz` per voxel.
pub(crate) fn soft_mask_with_slope(z: &[f64], k: f64) -> (Vec<f64>, Vec<f64>) {
    let q: Vec<f64> = z.iter().map(|&v| soft_mask_value(v, k)).collect();
    let slope = q
        .iter()
        .map(|&p| crate::sdm::soft_mask_derivative(p, k))
        .collect();
    (q, slope)
}

pub(crate) fn mask_loss_slices(z: &[f64], g: &[f64], k: f64) -> LossGrad {
    let (q, slope) = soft_mask_with_slope(z, k);
    let d = soft_dice_loss(&q, g);
    LossGrad {
        value: d.value,
        grad: d.grad.iter().zip(&slope).map(|(a, s)| a * s).collect(),
    }
}

/// Consistency between probabilities `p` and distances `z`: the value and
/// the gradients with respect to `p` and to `z`.
pub(crate) fn consistency_slices(p: &[f64], z: &[f64], k: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let (q, slope) = soft_mask_with_slope(z, k);
    let LossGrad { value, grad } = mse_slices(p, &q);
    let dz = grad.iter().zip(&slope).map(|(g, s)| -g * s).collect();
    (value, grad, dz)
}

/// `0.5 · soft Dice loss + 0.5 · binary cross-entropy`.
pub fn loss_seg(pred: &ProbabilityMap, gt: &Mask) -> Result<f64> {
    Ok(loss_seg_with_grad(pred, gt)?.value)
}

pub fn loss_seg_with_grad(pred: &ProbabilityMap, gt: &Mask) -> Result<LossGrad> {
    ensure_len(gt.shape(), pred.shape())?;
    Ok(seg_loss_slices(pred.data(), &gt.to_f64()))
}

/// Voxel-mean squared error between normalized signed distance maps.
pub fn loss_dis(pred: &SignedDistanceMap, gt: &SignedDistanceMap) -> Result<f64> {
    Ok(loss_dis_with_grad(pred, gt)?.value)
}

pub fn loss_dis_with_grad(pred: &SignedDistanceMap, gt: &SignedDistanceMap) -> Result<LossGrad> {
    ensure_len(gt.shape(), pred.shape())?;
    ensure_normalized(pred, "prediction")?;
    ensure_normalized(gt, "target")?;
    Ok(mse_slices(pred.data(), gt.data()))
}

/// Soft Dice loss between the soft mask of `pred` and the binary target.
pub fn loss_mask(pred: &SignedDistanceMap, gt: &Mask, cfg: TransformConfig) -> Result<f64> {
    Ok(loss_mask_with_grad(pred, gt, cfg)?.value)
}

pub fn loss_mask_with_grad(
    pred: &SignedDistanceMap,
    gt: &Mask,
    cfg: TransformConfig,
) -> Result<LossGrad> {
    ensure_len(gt.shape(), pred.shape())?;
    ensure_normalized(pred, "prediction")?;
    Ok(mask_loss_slices(pred.data(), &gt.to_f64(), cfg.k))
}

/// Voxel-mean squared difference between `pred_seg` and the soft mask of
/// `pred_sdm`. The ramp-up weight is not applied here.
pub fn loss_consistency(
    pred_seg: &ProbabilityMap,
    pred_sdm: &SignedDistanceMap,
    cfg: TransformConfig,
) -> Result<f64> {
    Ok(loss_consistency_with_grad(pred_seg, pred_sdm, cfg)?.0)
}

/// Value, gradient in `pred_seg`, gradient in `pred_sdm`.
pub fn loss_consistency_with_grad(
    pred_seg: &ProbabilityMap,
    pred_sdm: &SignedDistanceMap,
    cfg: TransformConfig,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    ensure_len(pred_seg.shape(), pred_sdm.shape())?;
    ensure_normalized(pred_sdm, "distance prediction")?;
    Ok(consistency_slices(pred_seg.data(), pred_sdm.data(), cfg.k))
}
