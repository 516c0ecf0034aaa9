//! Best-candidate selection and the mask/class losses.

use serde::{Deserialize, Serialize};

use super::network::HeadOutput;
use super::tape::{dice_terms, Tape, Var};
use crate::error::{Error, Result};
use crate::mask::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
    pub class: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            bce: 5.0,
            dice: 5.0,
            class: 2.0,
        }
    }
}

/// Index of the mask with the highest IoU against `gt`; ties go to the lowest index.
pub fn select_best(masks: &[Mask], gt: &Mask) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, m) in masks.iter().enumerate() {
        let iou = m.iou(gt);
        if best.is_none_or(|(_, b)| iou > b) {
            best = Some((i, iou));
        }
    }
    best.map(|(i, _)| i)
}

/// Predictions for one candidate query, in probability space.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePrediction {
    /// Row-major mask probabilities.
    pub mask_probs: Vec<f64>,
    /// `K + 1` class probabilities, void last.
    pub class_probs: Vec<f64>,
}

impl CandidatePrediction {
    pub fn mask(&self, width: usize, height: usize) -> Mask {
        Mask::from_fn(width, height, |x, y| self.mask_probs[y * width + x] > 0.5)
    }
}

fn ln(p: f64) -> f64 {
    p.max(1e-300).ln()
}

pub fn bce(probs: &[f64], target: &[f64]) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let pos = if t > 0.0 { t * ln(p) } else { 0.0 };
            let neg = if t < 1.0 { (1.0 - t) * ln(1.0 - p) } else { 0.0 };
            -(pos + neg)
        })
        .sum();
    total / probs.len() as f64
}

pub fn dice(probs: &[f64], target: &[f64]) -> f64 {
    let (num, den) = dice_terms(probs.iter().copied(), target);
    1.0 - num / den
}

/// Loss for one segment given its candidates' predictions.
///
/// `negative` indexes the negative name. The query whose thresholded mask best
/// overlaps `gt_mask` is trained towards the segment, or towards an empty mask
/// and the void class when the negative wins. Returns the loss and the winner.
pub fn compute_loss(
    predictions: &[CandidatePrediction],
    gt_mask: &Mask,
    gt_class: usize,
    negative: usize,
    weights: &LossWeights,
) -> Result<(f64, usize)> {
    if predictions.len() < 2 || negative >= predictions.len() {
        return Err(Error::Shape(format!(
            "need at least one positive and one negative, got {} predictions with negative {negative}",
            predictions.len()
        )));
    }
    let p = gt_mask.len();
    let void = predictions[0].class_probs.len() - 1;
    if gt_class >= void {
        return Err(Error::Shape(format!("class {gt_class} out of {void}")));
    }
    for pred in predictions {
        if pred.mask_probs.len() != p || pred.class_probs.len() != void + 1 {
            return Err(Error::Shape("prediction shapes differ".into()));
        }
    }
    let masks: Vec<Mask> = predictions
        .iter()
        .map(|c| c.mask(gt_mask.width(), gt_mask.height()))
        .collect();
    let best = select_best(&masks, gt_mask).expect("non-empty");
    let (target, class) = if best == negative {
        (vec![0.0; p], void)
    } else {
        (gt_target(gt_mask), gt_class)
    };
    let pred = &predictions[best];
    let loss = weights.bce * bce(&pred.mask_probs, &target)
        + weights.dice * dice(&pred.mask_probs, &target)
        + weights.class * -ln(pred.class_probs[class]);
    Ok((loss, best))
}

pub(crate) fn gt_target(mask: &Mask) -> Vec<f64> {
    (0..mask.len())
        .map(|i| if mask.get_index(i) { 1.0 } else { 0.0 })
        .collect()
}

/// Query rows that belong to one ground-truth segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentTarget {
    pub mask: Mask,
    pub class_index: usize,
    /// Query rows of this segment's candidates, negative included.
    pub rows: Vec<usize>,
    /// Row of the negative name.
    pub negative: usize,
}

/// Differentiable version of [`compute_loss`] on one decoder level.
/// Returns the loss node and the winning row.
pub fn segment_loss(
    tape: &mut Tape,
    head: &HeadOutput,
    target: &SegmentTarget,
    num_classes: usize,
    weights: &LossWeights,
) -> (Var, usize) {
    let (w, h) = (target.mask.width(), target.mask.height());
    let masks: Vec<Mask> = target.rows.iter().map(|&r| head.mask(tape, r, w, h)).collect();
    let best = target.rows[select_best(&masks, &target.mask).expect("segment has candidates")];
    let (mask_target, class) = if best == target.negative {
        (vec![0.0; w * h], num_classes)
    } else {
        (gt_target(&target.mask), target.class_index)
    };
    let logits = tape.select_rows(head.mask_logits, &[best]);
    let class_logits = tape.select_rows(head.class_logits, &[best]);
    let l_bce = tape.bce_with_logits(logits, mask_target.clone());
    let l_dice = tape.dice(logits, mask_target);
    let l_cls = tape.cross_entropy(class_logits, class);
    let loss = tape.weighted_sum(&[
        (l_bce, weights.bce),
        (l_dice, weights.dice),
        (l_cls, weights.class),
    ]);
    (loss, best)
}
