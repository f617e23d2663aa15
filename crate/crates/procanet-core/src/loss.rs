//! Segmentation losses over logit maps.
//!
//! All reductions run in f64 regardless of the tensor scalar, so loss values
//! and gradients keep full precision even for f32 networks. Label pixels
//! equal to [`NODATA_LABEL`] are excluded from every sum and from the
//! normalising count.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{activation, sigmoid_scalar, Activation, Tensor};

/// Sentinel in label rasters marking pixels without ground truth.
pub const NODATA_LABEL: f64 = 255.0;

/// Smoothing term keeping the dice ratio defined for empty masks.
pub const DICE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug)]
pub struct LossValues<F> {
    pub total: F,
    pub bce: F,
    pub dice: F,
}

pub struct LossGrad<F> {
    pub values: LossValues<F>,
    /// d(total)/d(logit), zero at nodata pixels.
    pub d_logits: Tensor<F>,
}

fn check_shapes<F: Scalar>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: format!("{:?}", a.shape()),
            right: format!("{:?}", b.shape()),
        });
    }
    Ok(())
}

/// Per-pixel target classification: Some(y) for a labelled pixel, None for
/// nodata. Anything else is an error.
fn target_value<F: Scalar>(t: F) -> Result<Option<f64>> {
    let v = t.as_f64();
    if v == 0.0 || v == 1.0 {
        Ok(Some(v))
    } else if v == NODATA_LABEL {
        Ok(None)
    } else {
        Err(Error::NonBinaryTarget { value: v })
    }
}

struct DiceSums {
    intersection: f64,
    sum_target: f64,
    sum_pred: f64,
    valid: usize,
}

fn dice_sums<F: Scalar>(probs: &Tensor<F>, target: &Tensor<F>) -> Result<DiceSums> {
    let mut s = DiceSums {
        intersection: 0.0,
        sum_target: 0.0,
        sum_pred: 0.0,
        valid: 0,
    };
    for (p, t) in probs.data().iter().zip(target.data()) {
        if let Some(y) = target_value(*t)? {
            let p = p.as_f64();
            s.intersection += y * p;
            s.sum_target += y;
            s.sum_pred += p;
            s.valid += 1;
        }
    }
    Ok(s)
}

/// Soft dice loss, one global ratio per call:
/// `1 - (2*sum(y*p) + eps) / (sum(y) + sum(p) + eps)`.
/// Exactly zero when `probs == target` on all labelled pixels.
pub fn dice_loss<F: Scalar>(probs: &Tensor<F>, target: &Tensor<F>) -> Result<F> {
    check_shapes("dice_loss", probs, target)?;
    let s = dice_sums(probs, target)?;
    if s.valid == 0 {
        return Err(Error::InvalidConfig(
            "dice_loss: target has no labelled pixels".into(),
        ));
    }
    let a = 2.0 * s.intersection + DICE_EPS;
    let b = s.sum_target + s.sum_pred + DICE_EPS;
    Ok(F::from_f64(1.0 - a / b))
}

/// One pixel of numerically stable binary cross-entropy on a logit:
/// `max(z,0) - z*y + ln(1 + exp(-|z|))`. Finite for any finite `z`.
fn bce_term(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy over labelled pixels, computed on logits.
pub fn bce_with_logits<F: Scalar>(logits: &Tensor<F>, target: &Tensor<F>) -> Result<F> {
    check_shapes("bce_with_logits", logits, target)?;
    let mut sum = 0.0f64;
    let mut valid = 0usize;
    for (z, t) in logits.data().iter().zip(target.data()) {
        if let Some(y) = target_value(*t)? {
            sum += bce_term(z.as_f64(), y);
            valid += 1;
        }
    }
    if valid == 0 {
        return Err(Error::InvalidConfig(
            "bce_with_logits: target has no labelled pixels".into(),
        ));
    }
    Ok(F::from_f64(sum / valid as f64))
}

/// Combined objective: `bce_with_logits + dice_loss(sigmoid(logits))`.
/// The parts are computed by the standalone functions and summed, so the
/// identity `total == bce + dice` holds bitwise.
pub fn combined_loss<F: Scalar>(logits: &Tensor<F>, target: &Tensor<F>) -> Result<LossValues<F>> {
    let bce = bce_with_logits(logits, target)?;
    let probs = activation(Activation::Sigmoid, logits);
    let dice = dice_loss(&probs, target)?;
    Ok(LossValues {
        total: bce + dice,
        bce,
        dice,
    })
}

/// Combined loss plus its analytic gradient with respect to the logits.
///
/// With `p = sigmoid(z)`, `A = 2*sum(y*p) + eps`, `B = sum(y) + sum(p) + eps`
/// and `Nv` labelled pixels:
///
///   d(bce)/dz  = (p - y) / Nv
///   d(dice)/dp = (A - 2*y*B) / B^2,   d(dice)/dz = d(dice)/dp * p*(1 - p)
pub fn combined_loss_grad<F: Scalar>(
    logits: &Tensor<F>,
    target: &Tensor<F>,
) -> Result<LossGrad<F>> {
    let values = combined_loss(logits, target)?;
    let probs = activation(Activation::Sigmoid, logits);
    let s = dice_sums(&probs, target)?;
    let a = 2.0 * s.intersection + DICE_EPS;
    let b = s.sum_target + s.sum_pred + DICE_EPS;
    let nv = s.valid as f64;

    let mut d = vec![F::zero(); logits.len()];
    for ((g, z), t) in d.iter_mut().zip(logits.data()).zip(target.data()) {
        if let Some(y) = target_value(*t)? {
            let p = sigmoid_scalar(z.as_f64());
            let d_bce = (p - y) / nv;
            let d_dice = (a - 2.0 * y * b) / (b * b) * p * (1.0 - p);
            *g = F::from_f64(d_bce + d_dice);
        }
    }
    Ok(LossGrad {
        values,
        d_logits: Tensor::from_vec(logits.shape(), d)?,
    })
}
