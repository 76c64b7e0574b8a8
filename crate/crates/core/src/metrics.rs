//! Confusion-matrix evaluation metrics for binary segmentation.
//!
//! Predictions are thresholded (default 0.5, strictly greater) against a
//! binary ground-truth mask; the four counts then derive accuracy,
//! precision, specificity, recall, dice and jaccard. A zero denominator
//! yields the defined value 0 and raises the `degenerate` flag instead of
//! erroring, so empty and full masks evaluate cleanly.

use alloc::format;

use crate::error::{CoreError, Result};
use crate::tensor::{Real, Tensor};

/// Default threshold applied to sigmoid outputs.
pub const METRIC_THRESHOLD: Real = 0.5;

/// Raw confusion counts, accumulable across samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    /// Accumulate one prediction/target pair at the given threshold.
    pub fn accumulate(&mut self, target: &Tensor, prediction: &Tensor, threshold: Real) -> Result<()> {
        if target.shape() != prediction.shape() {
            return Err(CoreError::shape(format!(
                "metrics: target shape {} does not match prediction shape {}",
                target.shape(),
                prediction.shape()
            )));
        }
        for (y, p) in target.data().iter().zip(prediction.data().iter()) {
            if *y != 0.0 && *y != 1.0 {
                return Err(CoreError::contract(format!(
                    "metrics: target value {y} is not binary"
                )));
            }
            let predicted = *p > threshold;
            let actual = *y == 1.0;
            match (actual, predicted) {
                (true, true) => self.tp += 1,
                (true, false) => self.fn_ += 1,
                (false, true) => self.fp += 1,
                (false, false) => self.tn += 1,
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// The six derived scores plus their provenance.
#[derive(Clone, Copy, Debug)]
pub struct MetricsReport {
    pub counts: Counts,
    pub threshold: Real,
    pub accuracy: Real,
    pub precision: Real,
    pub specificity: Real,
    pub recall: Real,
    pub dice: Real,
    pub jaccard: Real,
    /// Set when any score had a zero denominator (reported as 0).
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64, degenerate: &mut bool) -> Real {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as Real / den as Real
    }
}

impl MetricsReport {
    pub fn from_counts(counts: Counts, threshold: Real) -> Self {
        let mut degenerate = false;
        let c = &counts;
        let accuracy = ratio(c.tp + c.tn, c.total(), &mut degenerate);
        let precision = ratio(c.tp, c.tp + c.fp, &mut degenerate);
        let specificity = ratio(c.tn, c.tn + c.fp, &mut degenerate);
        let recall = ratio(c.tp, c.tp + c.fn_, &mut degenerate);
        let dice = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, &mut degenerate);
        let jaccard = ratio(c.tp, c.tp + c.fp + c.fn_, &mut degenerate);
        MetricsReport {
            counts,
            threshold,
            accuracy,
            precision,
            specificity,
            recall,
            dice,
            jaccard,
            degenerate,
        }
    }
}

/// One-shot evaluation of a single prediction against its target.
pub fn compute_metrics(target: &Tensor, prediction: &Tensor, threshold: Real) -> Result<MetricsReport> {
    let mut counts = Counts::default();
    counts.accumulate(target, prediction, threshold)?;
    Ok(MetricsReport::from_counts(counts, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn mask(bits: &[u8]) -> Tensor {
        Tensor::from_fn(Shape::d3(bits.len(), 1, 1), |i| bits[i] as Real)
    }

    #[test]
    fn worked_confusion_example() {
        // TP=8, FP=2, FN=2, TN=88 over 100 pixels.
        let mut y = alloc::vec![0u8; 100];
        let mut p = alloc::vec![0u8; 100];
        for i in 0..10 {
            y[i] = 1;
        }
        for i in 2..12 {
            p[i] = 1;
        }
        let r = compute_metrics(&mask(&y), &mask(&p), METRIC_THRESHOLD).unwrap();
        assert_eq!(
            (r.counts.tp, r.counts.fp, r.counts.fn_, r.counts.tn),
            (8, 2, 2, 88)
        );
        assert!((r.precision - 0.8).abs() < 1e-12);
        assert!((r.recall - 0.8).abs() < 1e-12);
        assert!((r.dice - 0.8).abs() < 1e-12);
        assert!((r.jaccard - 8.0 / 12.0).abs() < 1e-12);
        assert!((r.accuracy - 0.96).abs() < 1e-12);
        assert!((r.specificity - 88.0 / 90.0).abs() < 1e-12);
        assert!(!r.degenerate);
    }

    #[test]
    fn perfect_and_inverted_predictions() {
        let y = mask(&[1, 0, 1, 1, 0, 0]);
        let perfect = compute_metrics(&y, &y, METRIC_THRESHOLD).unwrap();
        assert_eq!(perfect.dice, 1.0);
        assert_eq!(perfect.accuracy, 1.0);
        assert_eq!(perfect.jaccard, 1.0);

        let inv = mask(&[0, 1, 0, 0, 1, 1]);
        let r = compute_metrics(&y, &inv, METRIC_THRESHOLD).unwrap();
        assert_eq!(r.accuracy, 0.0);
        assert_eq!(r.dice, 0.0);
    }

    #[test]
    fn degenerate_empty_masks_report_zero_with_flag() {
        let y = mask(&[0, 0, 0, 0]);
        let p = mask(&[0, 0, 0, 0]);
        let r = compute_metrics(&y, &p, METRIC_THRESHOLD).unwrap();
        // No positives anywhere: precision/recall/dice/jaccard all 0/0.
        assert_eq!(r.dice, 0.0);
        assert_eq!(r.precision, 0.0);
        assert!(r.degenerate);
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn counts_always_cover_every_pixel() {
        let y = mask(&[1, 1, 0, 0, 1, 0, 1, 0]);
        let p = Tensor::from_fn(Shape::d3(8, 1, 1), |i| 0.1 + 0.1 * i as Real);
        let r = compute_metrics(&y, &p, METRIC_THRESHOLD).unwrap();
        assert_eq!(r.counts.total(), 8);
    }

    #[test]
    fn threshold_is_strictly_greater() {
        let y = mask(&[1]);
        let p = Tensor::full(y.shape().clone(), 0.5);
        let r = compute_metrics(&y, &p, METRIC_THRESHOLD).unwrap();
        // 0.5 is not > 0.5: predicted negative.
        assert_eq!(r.counts.fn_, 1);
    }

    #[test]
    fn dice_dominates_jaccard() {
        let y = mask(&[1, 1, 1, 0, 0, 1, 0, 1]);
        let p = mask(&[1, 0, 1, 1, 0, 0, 0, 1]);
        let r = compute_metrics(&y, &p, METRIC_THRESHOLD).unwrap();
        assert!(r.dice >= r.jaccard);
    }
}
