//! Confusion counts, F1 / precision / recall / IoU, and dataset imbalance.

use std::iter::Sum;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Pixel confusion counts, positive class = changed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    /// Count over two equally sized binary masks.
    pub fn from_masks(pred: &[u8], gt: &[u8]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::Input(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        if pred.is_empty() {
            return Err(Error::Input("empty masks".into()));
        }
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p, g) {
                (1, 1) => c.tp += 1,
                (0, 0) => c.tn += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                _ => return Err(Error::Input(format!("non-binary mask value ({p}, {g})"))),
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn metrics(&self) -> MetricReport {
        compute_metrics(self)
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, tn: self.tn + o.tn, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_ }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Convenience wrapper over [`ConfusionCounts::from_masks`].
pub fn confusion_counts(pred: &[u8], gt: &[u8]) -> Result<ConfusionCounts> {
    ConfusionCounts::from_masks(pred, gt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic-mean F1 of precision and recall. Zero when either is zero.
pub fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision <= 0.0 || recall <= 0.0 {
        0.0
    } else {
        2.0 / (1.0 / precision + 1.0 / recall)
    }
}

/// `IoU = F1 / (2 - F1)`, an identity of the count definitions.
pub fn iou_from_f1(f1: f64) -> f64 {
    f1 / (2.0 - f1)
}

/// Metrics from global counts; a 0/0 ratio is reported as 0.
pub fn compute_metrics(c: &ConfusionCounts) -> MetricReport {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    MetricReport {
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        precision,
        recall,
        iou: ratio(c.tp, c.tp + c.fn_ + c.fp),
    }
}

/// Flat machine-readable record: raw fractions plus the counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl MetricRecord {
    pub fn new(c: &ConfusionCounts) -> Self {
        let m = compute_metrics(c);
        Self {
            f1: m.f1,
            precision: m.precision,
            recall: m.recall,
            iou: m.iou,
            tp: c.tp,
            tn: c.tn,
            fp: c.fp,
            fn_: c.fn_,
        }
    }

    /// `F1 92.01  Pre. 93.15  Rec. 90.90  IoU 85.21` style percentages.
    pub fn human(&self) -> String {
        format!(
            "F1 {:.2}  Pre. {:.2}  Rec. {:.2}  IoU {:.2}",
            self.f1 * 100.0,
            self.precision * 100.0,
            self.recall * 100.0,
            self.iou * 100.0
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub changed_pixels: u64,
    pub unchanged_pixels: u64,
}

impl DatasetStats {
    pub fn imbalance_ratio(&self) -> Result<f64> {
        imbalance_ratio(self)
    }
}

/// Unchanged-to-changed pixel ratio.
pub fn imbalance_ratio(stats: &DatasetStats) -> Result<f64> {
    if stats.changed_pixels == 0 {
        return Err(Error::Domain("imbalance ratio undefined without changed pixels".into()));
    }
    Ok(stats.unchanged_pixels as f64 / stats.changed_pixels as f64)
}

/// `1:R` with two decimals.
pub fn format_ratio(r: f64) -> String {
    format!("1:{r:.2}")
}
