//! Segmentation metrics and cross-validation aggregation.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Per-class pixel tallies (one-vs-rest).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    n_classes: usize,
    total_pixels: u64,
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(n_classes: usize) -> Self {
        ConfusionCounts {
            n_classes,
            total_pixels: 0,
            tp: vec![0; n_classes],
            fp: vec![0; n_classes],
            fn_: vec![0; n_classes],
        }
    }

    pub fn from_masks(pred: &[u8], gt: &[u8], n_classes: usize) -> Result<Self> {
        let mut c = Self::new(n_classes);
        c.accumulate(pred, gt)?;
        Ok(c)
    }

    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(
                "confusion_from_masks",
                format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len()),
            ));
        }
        let n = self.n_classes;
        if let Some(&v) = pred.iter().chain(gt).find(|&&v| v as usize >= n) {
            return Err(Error::ClassOutOfRange {
                value: v as usize,
                n_classes: n,
            });
        }
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p as usize, g as usize);
            if p == g {
                self.tp[p] += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[g] += 1;
            }
        }
        self.total_pixels += pred.len() as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        assert_eq!(self.n_classes, other.n_classes);
        self.total_pixels += other.total_pixels;
        for k in 0..self.n_classes {
            self.tp[k] += other.tp[k];
            self.fp[k] += other.fp[k];
            self.fn_[k] += other.fn_[k];
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn total_pixels(&self) -> u64 {
        self.total_pixels
    }

    pub fn tp(&self, k: usize) -> u64 {
        self.tp[k]
    }

    pub fn fp(&self, k: usize) -> u64 {
        self.fp[k]
    }

    pub fn fn_(&self, k: usize) -> u64 {
        self.fn_[k]
    }

    pub fn tn(&self, k: usize) -> u64 {
        self.total_pixels - self.tp[k] - self.fp[k] - self.fn_[k]
    }

    /// `|P ∪ G|` for class `k`.
    fn union(&self, k: usize) -> u64 {
        self.tp[k] + self.fp[k] + self.fn_[k]
    }

    /// IoU of class `k`, `None` when the class is absent from both masks.
    pub fn class_iou(&self, k: usize) -> Option<f64> {
        let u = self.union(k);
        (u > 0).then(|| self.tp[k] as f64 / u as f64)
    }

    /// Recall of class `k`, `None` when the class is absent from the ground truth.
    pub fn class_recall(&self, k: usize) -> Option<f64> {
        let g = self.tp[k] + self.fn_[k];
        (g > 0).then(|| self.tp[k] as f64 / g as f64)
    }
}

fn ratio(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinaryMetrics {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
}

/// Foreground is class 1. Dice and IoU of two empty masks are 1; precision
/// and recall with an empty denominator are 0.
pub fn binary_metrics(c: &ConfusionCounts) -> BinaryMetrics {
    assert_eq!(c.n_classes, 2, "binary metrics need foreground/background counts");
    let (tp, fp, fn_) = (c.tp[1], c.fp[1], c.fn_[1]);
    BinaryMetrics {
        dice: ratio(2 * tp, 2 * tp + fp + fn_, 1.0),
        iou: ratio(tp, tp + fp + fn_, 1.0),
        precision: ratio(tp, tp + fp, 0.0),
        recall: ratio(tp, tp + fn_, 0.0),
        accuracy: ratio(tp + c.tn(1), c.total_pixels, 1.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemanticMetrics {
    pub mean_iou: f64,
    pub pixel_acc: f64,
    pub mean_acc: f64,
    pub fw_iou: f64,
}

/// mIoU skips classes absent from both masks; mAcc averages recall over the
/// classes present in the ground truth.
pub fn semantic_metrics(c: &ConfusionCounts) -> SemanticMetrics {
    let ks = 0..c.n_classes;
    let mean = |v: Vec<f64>| if v.is_empty() { 1.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let total = c.total_pixels as f64;
    SemanticMetrics {
        mean_iou: mean(ks.clone().filter_map(|k| c.class_iou(k)).collect()),
        pixel_acc: ratio(c.tp.iter().sum(), c.total_pixels, 1.0),
        mean_acc: mean(ks.clone().filter_map(|k| c.class_recall(k)).collect()),
        fw_iou: ks
            .filter_map(|k| {
                let g = c.tp[k] + c.fn_[k];
                (g > 0).then(|| g as f64 / total * c.class_iou(k).unwrap_or(0.0))
            })
            .sum(),
    }
}

/// Named metric values in a fixed column order.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub entries: Vec<(String, f64)>,
}

pub const BINARY_COLUMNS: [&str; 5] = ["dice", "iou", "precision", "recall", "accuracy"];
pub const SEMANTIC_COLUMNS: [&str; 4] = ["miou", "pixel_acc", "mean_acc", "fw_iou"];

impl From<BinaryMetrics> for MetricRecord {
    fn from(m: BinaryMetrics) -> Self {
        let v = [m.dice, m.iou, m.precision, m.recall, m.accuracy];
        MetricRecord::new(&BINARY_COLUMNS, &v)
    }
}

impl From<SemanticMetrics> for MetricRecord {
    fn from(m: SemanticMetrics) -> Self {
        let v = [m.mean_iou, m.pixel_acc, m.mean_acc, m.fw_iou];
        MetricRecord::new(&SEMANTIC_COLUMNS, &v)
    }
}

impl MetricRecord {
    pub fn new(names: &[&str], values: &[f64]) -> Self {
        MetricRecord {
            entries: names.iter().map(|s| s.to_string()).zip(values.iter().copied()).collect(),
        }
    }

    /// Binary metrics for two-class counts, semantic metrics otherwise.
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        if c.n_classes() == 2 {
            binary_metrics(c).into()
        } else {
            semantic_metrics(c).into()
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Overlap score used for model selection and curves: IoU or mIoU.
    pub fn headline_iou(&self) -> f64 {
        self.get("iou").or_else(|| self.get("miou")).unwrap_or(f64::NAN)
    }

    /// Column-wise mean of records sharing one layout.
    pub fn mean(records: &[MetricRecord]) -> Result<MetricRecord> {
        let first = records
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot average zero metric records".into()))?;
        let mut out = first.clone();
        for (i, (name, v)) in out.entries.iter_mut().enumerate() {
            let mut s = 0.0;
            for r in records {
                match r.entries.get(i) {
                    Some((n, x)) if n == name => s += x,
                    _ => return Err(Error::InvalidArgument(format!("metric column {name} missing"))),
                }
            }
            *v = s / records.len() as f64;
        }
        Ok(out)
    }
}

/// Mean and population standard deviation (Welford's update).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &x) in values.iter().enumerate() {
        let d = x - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (x - mean);
    }
    Some((mean, (m2 / values.len() as f64).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl fmt::Display for MeanStd {
    /// Percentages with one decimal, e.g. `80.5 ± 2.5`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1} ± {:.1}", 100.0 * self.mean, 100.0 * self.std)
    }
}

/// Mean ± std of every column over folds.
pub fn aggregate_folds(per_fold: &[MetricRecord]) -> Result<Vec<(String, MeanStd)>> {
    let first = per_fold
        .first()
        .ok_or_else(|| Error::InvalidArgument("no folds to aggregate".into()))?;
    first
        .names()
        .map(|name| {
            let vals: Vec<f64> = per_fold
                .iter()
                .map(|r| r.get(name).ok_or_else(|| Error::InvalidArgument(format!("fold lacks metric {name}"))))
                .collect::<Result<_>>()?;
            let (mean, std) = mean_std(&vals).expect("non-empty");
            Ok((name.to_string(), MeanStd { mean, std }))
        })
        .collect()
}

/// `sigmoid(logit) > 0.5`, i.e. strictly positive logits, for `[B, 1, H, W]`.
pub fn binary_prediction<T: Scalar>(logits: &[T]) -> Vec<u8> {
    logits.iter().map(|&v| u8::from(v.as_f64() > 0.0)).collect()
}

/// Channel argmax of `[B, C, H, W]` logits, lowest index on ties; result is `[B, H, W]`.
pub fn argmax_prediction<T: Scalar>(logits: &[T], batch: usize, classes: usize) -> Vec<u8> {
    let plane = logits.len() / (batch * classes).max(1);
    let mut out = vec![0u8; batch * plane];
    for b in 0..batch {
        let base = b * classes * plane;
        for p in 0..plane {
            let mut best = 0;
            let mut best_v = logits[base + p].as_f64();
            for c in 1..classes {
                let v = logits[base + c * plane + p].as_f64();
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out[b * plane + p] = best as u8;
        }
    }
    out
}

/// Per-image predictions from logits with `classes` output channels (1 means binary).
pub fn predict_masks<T: Scalar>(logits: &[T], batch: usize, classes: usize) -> Vec<u8> {
    if classes == 1 {
        binary_prediction(logits)
    } else {
        argmax_prediction(logits, batch, classes)
    }
}
