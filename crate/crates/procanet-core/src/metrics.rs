//! Pixel-level confusion counts and the derived evaluation metrics.
//!
//! Counts are additive across patches and scenes, so dataset-level metrics
//! come from one merged count: IoU here is the global ratio
//! `sum(intersection) / sum(union)`, not a per-image average.

use crate::error::{Error, Result};
use crate::loss::NODATA_LABEL;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    /// Water pixels both maps agree on.
    pub fn intersection(&self) -> u64 {
        self.true_pos
    }

    /// Water pixels in either map.
    pub fn union(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
        self.true_neg += other.true_neg;
    }
}

/// Count agreement between a binary prediction map and a label map.
/// Label pixels equal to the nodata sentinel are skipped; both maps must be
/// strictly 0/1 elsewhere.
pub fn confusion_counts<F: Scalar>(
    pred: &Tensor<F>,
    truth: &Tensor<F>,
) -> Result<ConfusionCounts> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            op: "confusion_counts",
            left: format!("{:?}", pred.shape()),
            right: format!("{:?}", truth.shape()),
        });
    }
    let mut c = ConfusionCounts::default();
    for (p, t) in pred.data().iter().zip(truth.data()) {
        let t = t.as_f64();
        if t == NODATA_LABEL {
            continue;
        }
        if t != 0.0 && t != 1.0 {
            return Err(Error::NonBinaryTarget { value: t });
        }
        let p = p.as_f64();
        if p != 0.0 && p != 1.0 {
            return Err(Error::NonBinaryTarget { value: p });
        }
        match (p == 1.0, t == 1.0) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    // Empty denominators mean the class never occurred; score 0 by convention.
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Derive all scores from one confusion count. Errors on an empty count.
pub fn metrics(c: &ConfusionCounts) -> Result<Metrics> {
    if c.total() == 0 {
        return Err(Error::EmptyCounts);
    }
    let accuracy = ratio(c.true_pos + c.true_neg, c.total());
    let precision = ratio(c.true_pos, c.true_pos + c.false_pos);
    let recall = ratio(c.true_pos, c.true_pos + c.false_neg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let iou = ratio(c.intersection(), c.union());
    Ok(Metrics {
        accuracy,
        precision,
        recall,
        f1,
        iou,
    })
}

/// JSON shape of an evaluation report.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub f1: f64,
    pub iou: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl MetricsReport {
    pub fn from_counts(c: &ConfusionCounts) -> Result<Self> {
        let m = metrics(c)?;
        Ok(MetricsReport {
            accuracy: m.accuracy,
            f1: m.f1,
            iou: m.iou,
            tp: c.true_pos,
            fp: c.false_pos,
            fn_: c.false_neg,
            tn: c.true_neg,
        })
    }
}
