//! Confusion-matrix segmentation metrics: PA, per-class IoU / precision /
//! recall / F1, and frequency-weighted IoU.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer class map `[B, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    batch: usize,
    h: usize,
    w: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(batch: usize, h: usize, w: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != batch * h * w {
            return Err(Error::shape(
                "label_map",
                format!("{} labels for {batch}x{h}x{w}", labels.len()),
            ));
        }
        Ok(Self { batch, h, w, labels })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Labels of sample `b`.
    pub fn sample(&self, b: usize) -> &[u8] {
        &self.labels[b * self.h * self.w..][..self.h * self.w]
    }
}

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::shape("confusion", "counts must be classes x classes"));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape(
                "confusion",
                format!("{} predictions vs {} labels", pred.len(), truth.len()),
            ));
        }
        if let Some(&bad) = pred.iter().chain(truth).find(|&&l| l as usize >= self.classes) {
            return Err(Error::invalid(
                "confusion",
                format!("label {bad} out of range for {} classes", self.classes),
            ));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        debug_assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, n: usize) -> u64 {
        (0..self.classes).map(|p| self.get(n, p)).sum()
    }

    pub fn col_sum(&self, n: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, n)).sum()
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Ground-truth pixel count.
    pub support: u64,
    /// False when the class appears in neither predictions nor ground truth.
    pub present: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pixel_accuracy: f64,
    pub fw_iou: f64,
    pub mean_iou: f64,
    pub mean_f1: f64,
    /// Mean IoU over present classes other than background (index 0).
    pub mean_foreground_iou: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn from_confusion(confusion: ConfusionMatrix, names: &[String]) -> Result<Self> {
        let n = confusion.classes();
        if names.len() != n {
            return Err(Error::invalid(
                "metrics",
                format!("{} class names for {n} classes", names.len()),
            ));
        }
        let total = confusion.total() as f64;
        let mut per_class = Vec::with_capacity(n);
        let mut trace = 0u64;
        for (c, name) in names.iter().enumerate() {
            let tp = confusion.get(c, c);
            trace += tp;
            let row = confusion.row_sum(c);
            let col = confusion.col_sum(c);
            let (tpf, rowf, colf) = (tp as f64, row as f64, col as f64);
            let precision = ratio(tpf, colf);
            let recall = ratio(tpf, rowf);
            per_class.push(ClassMetrics {
                name: name.clone(),
                iou: ratio(tpf, rowf + colf - tpf),
                precision,
                recall,
                f1: ratio(2.0 * precision * recall, precision + recall),
                support: row,
                present: row + col > 0,
            });
        }
        let fw_iou = per_class
            .iter()
            .map(|m| ratio(m.support as f64, total) * m.iou)
            .sum();
        let mean_over = |pick: &dyn Fn(&ClassMetrics) -> f64, skip_bg: bool| {
            let vals: Vec<f64> = per_class
                .iter()
                .enumerate()
                .filter(|(i, m)| m.present && !(skip_bg && *i == 0))
                .map(|(_, m)| pick(m))
                .collect();
            ratio(vals.iter().sum(), vals.len() as f64)
        };
        Ok(Self {
            pixel_accuracy: ratio(trace as f64, total),
            fw_iou,
            mean_iou: mean_over(&|m| m.iou, false),
            mean_f1: mean_over(&|m| m.f1, false),
            mean_foreground_iou: mean_over(&|m| m.iou, true),
            per_class,
            confusion,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("metrics report: {e}")))
    }

    /// Per-class table followed by the global scores.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<14} {:>8} {:>10} {:>8} {:>8} {:>10}",
            "class", "IoU", "Precision", "Recall", "F1", "pixels"
        );
        for m in &self.per_class {
            let _ = writeln!(
                s,
                "{:<14} {:>8.4} {:>10.4} {:>8.4} {:>8.4} {:>10}{}",
                m.name,
                m.iou,
                m.precision,
                m.recall,
                m.f1,
                m.support,
                if m.present { "" } else { "  (absent)" }
            );
        }
        let _ = writeln!(s, "PA      {:.4}", self.pixel_accuracy);
        let _ = writeln!(s, "FWIoU   {:.4}", self.fw_iou);
        let _ = writeln!(s, "mIoU    {:.4}", self.mean_iou);
        let _ = writeln!(s, "mF1     {:.4}", self.mean_f1);
        let _ = writeln!(s, "fg mIoU {:.4}", self.mean_foreground_iou);
        let _ = writeln!(s, "confusion (rows: ground truth, columns: prediction)");
        let n = self.confusion.classes();
        for t in 0..n {
            let row: Vec<String> = (0..n).map(|p| self.confusion.get(t, p).to_string()).collect();
            let _ = writeln!(s, "  {}", row.join("\t"));
        }
        s
    }
}

pub fn compute_metrics(pred: &LabelMap, truth: &LabelMap, names: &[String]) -> Result<MetricsReport> {
    if pred.batch != truth.batch || pred.extents() != truth.extents() {
        return Err(Error::shape("metrics", "prediction and ground truth differ in shape"));
    }
    let mut cm = ConfusionMatrix::new(names.len());
    cm.accumulate(pred.labels(), truth.labels())?;
    MetricsReport::from_confusion(cm, names)
}
