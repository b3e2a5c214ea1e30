//! Confusion-matrix based segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, IGNORE_LABEL};
use crate::CLASS_NAMES;

/// Rows are ground truth, columns are predictions; ignore pixels are never counted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::InvalidInput(format!(
                "{num_classes} classes need {} counts, got {}",
                num_classes * num_classes,
                counts.len()
            )));
        }
        Ok(Self {
            num_classes,
            counts,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/ground-truth pair.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if !pred.same_dims(gt) {
            return Err(Error::InvalidPair(format!(
                "prediction is {}x{}, ground truth is {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        gt.validate_classes(self.num_classes)?;
        let k = self.num_classes;
        // validate first so a bad prediction leaves the matrix untouched
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g != IGNORE_LABEL && p as usize >= k {
                return Err(Error::InvalidInput(format!(
                    "prediction {p} is out of range for {k} classes"
                )));
            }
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g != IGNORE_LABEL {
                self.counts[g as usize * k + p as usize] += 1;
            }
        }
        Ok(())
    }

    /// Elementwise sum; the monoid operation for parallel accumulation.
    pub fn merge(mut self, other: &ConfusionMatrix) -> Result<Self> {
        if self.num_classes != other.num_classes {
            return Err(Error::InvalidPair("confusion matrices differ in class count".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(self)
    }

    fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    fn false_positives(&self, c: usize) -> u64 {
        (0..self.num_classes).filter(|&g| g != c).map(|g| self.get(g, c)).sum()
    }

    fn false_negatives(&self, c: usize) -> u64 {
        (0..self.num_classes).filter(|&p| p != c).map(|p| self.get(c, p)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` where the class has an empty union (absent from both prediction and ground truth).
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes with a defined IoU; `None` if there are none.
    pub miou: Option<f64>,
}

pub fn iou_per_class(cm: &ConfusionMatrix) -> IouReport {
    let per_class: Vec<Option<f64>> = (0..cm.num_classes)
        .map(|c| {
            let tp = cm.true_positives(c);
            let union = tp + cm.false_positives(c) + cm.false_negatives(c);
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    IouReport { per_class, miou }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

pub fn precision_recall(cm: &ConfusionMatrix) -> Vec<PrecisionRecall> {
    (0..cm.num_classes)
        .map(|c| {
            let tp = cm.true_positives(c);
            let predicted = tp + cm.false_positives(c);
            let actual = tp + cm.false_negatives(c);
            PrecisionRecall {
                precision: (predicted > 0).then(|| tp as f64 / predicted as f64),
                recall: (actual > 0).then(|| tp as f64 / actual as f64),
            }
        })
        .collect()
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map(|v| format!("{:.2}", 100.0 * v)).unwrap_or_else(|| "-".into())
}

/// Plain-text IoU table in the column order head, torso, leg, tail, bg, mIoU.
pub fn render_iou_table(report: &IouReport) -> String {
    let order: Vec<usize> = (1..report.per_class.len()).chain(std::iter::once(0)).collect();
    let mut header = String::new();
    let mut row = String::new();
    for &c in &order {
        let name = CLASS_NAMES.get(c).map(|s| s.to_string()).unwrap_or_else(|| format!("c{c}"));
        header.push_str(&format!("{name:>8}"));
        row.push_str(&format!("{:>8}", fmt_pct(report.per_class[c])));
    }
    header.push_str(&format!("{:>8}", "mIoU"));
    row.push_str(&format!("{:>8}", fmt_pct(report.miou)));
    format!("{header}\n{row}\n")
}
