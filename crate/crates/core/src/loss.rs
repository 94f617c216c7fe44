//! Training objectives on raw logits.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Smoothing constant of the soft IoU loss.
pub const IOU_SMOOTH: f64 = 1.0;

/// Mean binary cross-entropy, evaluated as
/// `max(z, 0) - z t + log(1 + exp(-|z|))`.
pub fn bce_loss<'t, T: Scalar>(logits: Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
    logits.bce_with_logits(target)
}

/// Soft Jaccard loss `1 - (sum pt + 1) / (sum p + sum t - sum pt + 1)` with
/// `p = sigmoid(z)`, summed over the whole batch.
pub fn iou_loss<'t, T: Scalar>(logits: Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
    if logits.shape() != target.shape() {
        return Err(Error::shape("iou_loss", &logits.shape(), target.shape()));
    }
    let tape = logits.tape();
    let t_sum: f64 = target.data().iter().map(|v| v.as_f64()).sum();
    let p = logits.sigmoid()?;
    let inter = p.mul(tape.constant(target.clone()))?.sum()?;
    let union = p.sum()?.sub(inter)?.add_scalar(t_sum + IOU_SMOOTH)?;
    let ratio = inter.add_scalar(IOU_SMOOTH)?.div(union)?;
    ratio.scale(-1.0)?.add_scalar(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Bce,
    #[serde(rename = "bce+iou")]
    BceIou,
}

impl LossKind {
    pub fn compute<'t, T: Scalar>(self, logits: Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
        let bce = bce_loss(logits, target)?;
        match self {
            LossKind::Bce => Ok(bce),
            LossKind::BceIou => bce.add(iou_loss(logits, target)?),
        }
    }
}
