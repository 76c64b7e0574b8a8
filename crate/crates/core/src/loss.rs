//! Composite segmentation losses.
//!
//! The elementary losses (clamped binary cross-entropy and smoothed dice)
//! live on the tape as differentiable ops; this module composes them into
//! the training objectives: the per-head segmentation loss is the equal
//! average of the two, and the cascade objective is the sum of the lung
//! and infection head losses.

use crate::error::Result;
use crate::tape::{NodeId, Reduction, Tape};
use crate::tensor::Tensor;

/// `0.5 * bce + 0.5 * dice` against a binary target mask.
pub fn segmentation_loss(
    tape: &mut Tape,
    prediction: NodeId,
    target: &Tensor,
    reduction: Reduction,
) -> Result<NodeId> {
    let bce = tape.bce(prediction, target, reduction)?;
    let dice = tape.dice_loss(prediction, target)?;
    let half_bce = tape.scale(bce, 0.5);
    let half_dice = tape.scale(dice, 0.5);
    tape.add(half_bce, half_dice)
}

/// Joint cascade objective: sum of the per-head segmentation losses.
pub fn cascade_loss(
    tape: &mut Tape,
    lung_pred: NodeId,
    lung_target: &Tensor,
    infection_pred: NodeId,
    infection_target: &Tensor,
    reduction: Reduction,
) -> Result<NodeId> {
    let lung = segmentation_loss(tape, lung_pred, lung_target, reduction)?;
    let infection = segmentation_loss(tape, infection_pred, infection_target, reduction)?;
    tape.add(lung, infection)
}
