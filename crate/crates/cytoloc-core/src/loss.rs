//! Loss terms for joint localization and counting under mixed supervision.
//!
//! Per image, three terms combine into `joint = l_s + alpha * l_c +
//! beta_eff * l_t`:
//!
//! * `l_s`: mean binary cross-entropy between the predicted probability map
//!   and the dilated point mask. Only defined for point-annotated (D1)
//!   images; for count-only (D2) images it contributes zero.
//! * `l_c`: relative count error `|C - c_pred| / C` against the recorded
//!   count (exact for D1, eyeballed for D2).
//! * `l_t`: cross-branch consistency `|c_pred - c_mask| / C`, where `c_mask`
//!   is the number of connected components in the thresholded probability
//!   map. `c_mask` is treated as a constant: the term pulls the counting
//!   branch toward the localization branch but never backpropagates into the
//!   decoder. `beta_eff` is zero during the warm-up epochs.
//!
//! All arithmetic runs in `f64` so the documented values hold to 1e-6 even
//! though predictions are `f32`.

use serde::{Deserialize, Serialize};

use crate::data::{GroundTruthMask, SupervisionLevel};
use crate::eval::{binarize_and_clean, count_components};
use crate::net::MultitaskPrediction;
use crate::tensor::{BinaryMask, Tensor};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the
/// log-loss so it stays finite for saturated predictions.
pub const PROB_CLAMP: f64 = 1e-7;

/// Threshold used when deriving a count from the probability map for the
/// consistency term. No minimum-area filtering is applied here; that is an
/// evaluation-time cleanup step.
pub const CONSISTENCY_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LossError {
    #[error("true count must be at least 1")]
    ZeroTrueCount,
    #[error("probability map is {probs_h}x{probs_w} with {channels} channels, target mask is {mask_h}x{mask_w}")]
    ShapeMismatch {
        channels: usize,
        probs_h: usize,
        probs_w: usize,
        mask_h: usize,
        mask_w: usize,
    },
    #[error("point-annotated image requires a ground-truth mask")]
    MissingMask,
    #[error("prediction contains non-finite values")]
    NonFinite,
}

/// Mean binary cross-entropy of a probability map against a binary mask.
pub fn loss_localization(probs: &Tensor, target: &BinaryMask) -> Result<f64, LossError> {
    check_mask_shape(probs, target)?;
    let n = target.data().len() as f64;
    let mut acc = 0.0f64;
    for (&p, &y) in probs.data().iter().zip(target.data()) {
        let p = clamp_prob(p)?;
        acc += if y != 0 {
            -libm::log(p)
        } else {
            -libm::log(1.0 - p)
        };
    }
    Ok(acc / n)
}

/// [`loss_localization`] plus its gradient with respect to each probability:
/// `dL/dp = (p - y) / (p (1 - p)) / N`.
pub fn loss_localization_grad(
    probs: &Tensor,
    target: &BinaryMask,
) -> Result<(f64, Tensor), LossError> {
    check_mask_shape(probs, target)?;
    let n = target.data().len() as f64;
    let mut acc = 0.0f64;
    let mut grad = Tensor::zeros(1, probs.height(), probs.width());
    for ((&p, &y), g) in probs
        .data()
        .iter()
        .zip(target.data())
        .zip(grad.data_mut())
    {
        let p = clamp_prob(p)?;
        let y = if y != 0 { 1.0 } else { 0.0 };
        acc += if y > 0.5 {
            -libm::log(p)
        } else {
            -libm::log(1.0 - p)
        };
        *g = ((p - y) / (p * (1.0 - p)) / n) as f32;
    }
    Ok((acc / n, grad))
}

/// Relative count error `|C - c_pred| / C`. `c_true` must be at least 1.
pub fn loss_count(c_true: u32, c_pred: f64) -> Result<f64, LossError> {
    if c_true == 0 {
        return Err(LossError::ZeroTrueCount);
    }
    if !c_pred.is_finite() {
        return Err(LossError::NonFinite);
    }
    Ok((c_true as f64 - c_pred).abs() / c_true as f64)
}

/// Cross-branch consistency `|c_pred - c_from_mask| / C`, normalized by the
/// same true count as [`loss_count`].
pub fn loss_consistency(c_true: u32, c_pred: f64, c_from_mask: f64) -> Result<f64, LossError> {
    if c_true == 0 {
        return Err(LossError::ZeroTrueCount);
    }
    if !c_pred.is_finite() || !c_from_mask.is_finite() {
        return Err(LossError::NonFinite);
    }
    Ok((c_pred - c_from_mask).abs() / c_true as f64)
}

/// Count implied by the localization branch: connected components of the
/// probability map thresholded at [`CONSISTENCY_THRESHOLD`].
pub fn mask_component_count(probs: &Tensor) -> usize {
    let mask = binarize_and_clean(probs, CONSISTENCY_THRESHOLD, 0);
    count_components(&mask).num_components
}

/// Term weights and consistency warm-up length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the count term.
    pub alpha: f64,
    /// Weight of the consistency term (after warm-up).
    pub beta: f64,
    /// Number of initial epochs with the consistency term disabled. Epochs
    /// are 0-based: with `warmup_epochs = 25` the term first applies in
    /// epoch 25, the 26th pass.
    pub warmup_epochs: u32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            warmup_epochs: 25,
        }
    }
}

impl LossWeights {
    /// `beta` once warm-up has passed, zero before.
    pub fn beta_effective(&self, epoch: u32) -> f64 {
        if epoch < self.warmup_epochs {
            0.0
        } else {
            self.beta
        }
    }
}

/// Per-term values for one image. `l_t` is always computed for logging even
/// while warm-up keeps it out of `joint`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    /// `None` for count-only (D2) images.
    pub l_s: Option<f64>,
    pub l_c: f64,
    pub l_t: f64,
    /// `l_s + alpha * l_c + beta_eff * l_t` (missing `l_s` counts as zero).
    pub joint: f64,
}

/// Gradients of the joint loss with respect to the network heads.
#[derive(Debug, Clone)]
pub struct HeadGrads {
    /// dJoint/d(mask probability), per pixel; `None` when no localization
    /// term is active.
    pub d_mask: Option<Tensor>,
    /// dJoint/d(count estimate). The consistency part differentiates only
    /// through the counting branch; the mask-derived count is a constant.
    pub d_count: f64,
}

/// Joint loss for one image.
pub fn joint_loss(
    pred: &MultitaskPrediction,
    mask: Option<&GroundTruthMask>,
    c_true: u32,
    level: SupervisionLevel,
    weights: &LossWeights,
    epoch: u32,
) -> Result<LossBreakdown, LossError> {
    let (breakdown, _) = compute(pred, mask, c_true, level, weights, epoch, false)?;
    Ok(breakdown)
}

/// Joint loss plus head gradients for one image.
pub fn joint_loss_grads(
    pred: &MultitaskPrediction,
    mask: Option<&GroundTruthMask>,
    c_true: u32,
    level: SupervisionLevel,
    weights: &LossWeights,
    epoch: u32,
) -> Result<(LossBreakdown, HeadGrads), LossError> {
    let (breakdown, grads) = compute(pred, mask, c_true, level, weights, epoch, true)?;
    Ok((breakdown, grads.expect("gradients requested")))
}

fn compute(
    pred: &MultitaskPrediction,
    mask: Option<&GroundTruthMask>,
    c_true: u32,
    level: SupervisionLevel,
    weights: &LossWeights,
    epoch: u32,
    want_grads: bool,
) -> Result<(LossBreakdown, Option<HeadGrads>), LossError> {
    if !pred.mask_probs.is_finite() {
        return Err(LossError::NonFinite);
    }
    let c_pred = pred.count_estimate as f64;
    let c_mask = mask_component_count(&pred.mask_probs) as f64;
    let l_c = loss_count(c_true, c_pred)?;
    let l_t = loss_consistency(c_true, c_pred, c_mask)?;
    let beta_eff = weights.beta_effective(epoch);

    let (l_s, d_mask) = match level {
        SupervisionLevel::D1 => {
            let gt = mask.ok_or(LossError::MissingMask)?;
            if want_grads {
                let (value, grad) = loss_localization_grad(&pred.mask_probs, &gt.mask)?;
                (Some(value), Some(grad))
            } else {
                (Some(loss_localization(&pred.mask_probs, &gt.mask)?), None)
            }
        }
        SupervisionLevel::D2 => (None, None),
    };

    let joint = l_s.unwrap_or(0.0) + weights.alpha * l_c + beta_eff * l_t;
    let breakdown = LossBreakdown { l_s, l_c, l_t, joint };
    let grads = want_grads.then(|| HeadGrads {
        d_mask,
        d_count: weights.alpha * sign0(c_pred - c_true as f64) / c_true as f64
            + beta_eff * sign0(c_pred - c_mask) / c_true as f64,
    });
    Ok((breakdown, grads))
}

/// Sign with the subgradient convention `sign0(0) = 0` (note `f64::signum`
/// maps +0 to +1, which would inject spurious gradient at the kink).
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn clamp_prob(p: f32) -> Result<f64, LossError> {
    if !p.is_finite() {
        return Err(LossError::NonFinite);
    }
    Ok((p as f64).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
}

fn check_mask_shape(probs: &Tensor, target: &BinaryMask) -> Result<(), LossError> {
    if probs.channels() != 1
        || probs.height() != target.height()
        || probs.width() != target.width()
    {
        return Err(LossError::ShapeMismatch {
            channels: probs.channels(),
            probs_h: probs.height(),
            probs_w: probs.width(),
            mask_h: target.height(),
            mask_w: target.width(),
        });
    }
    Ok(())
}
