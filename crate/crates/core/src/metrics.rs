//! Confusion counting and the six segmentation metrics.
//!
//! Multi-class counts are one-vs-rest per class and then summed over classes
//! (micro aggregation). With every pixel carrying exactly one label, the
//! summed `TP + FP` and `TP + FN` both equal the pixel count, so aggregate
//! precision, recall and F1 coincide. Per-class IoU is kept alongside as a
//! supplementary macro view.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::data::ClassMask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ClassCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Intersection over union of this class; 1.0 when the class is absent
    /// from both prediction and ground truth.
    pub fn iou(&self) -> f64 {
        let d = self.tp + self.fp + self.fn_;
        if d == 0 {
            1.0
        } else {
            self.tp as f64 / d as f64
        }
    }
}

impl Add for ClassCounts {
    type Output = ClassCounts;

    fn add(self, o: ClassCounts) -> ClassCounts {
        ClassCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

/// Per-class one-vs-rest counts. Aggregates are sums over classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub per_class: Vec<ClassCounts>,
}

impl ConfusionCounts {
    pub fn zeros(n_classes: usize) -> Self {
        ConfusionCounts {
            per_class: vec![ClassCounts::default(); n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.per_class.len()
    }

    /// Builds counts from a `confusion[gt][pred]` pixel matrix.
    pub fn from_matrix(matrix: &[Vec<u64>]) -> Self {
        let n = matrix.len();
        let total: u64 = matrix.iter().flatten().sum();
        let per_class = (0..n)
            .map(|c| {
                let tp = matrix[c][c];
                let gt_c: u64 = matrix[c].iter().sum();
                let pred_c: u64 = matrix.iter().map(|row| row[c]).sum();
                let fp = pred_c - tp;
                let fn_ = gt_c - tp;
                ClassCounts {
                    tp,
                    fp,
                    fn_,
                    tn: total - tp - fp - fn_,
                }
            })
            .collect();
        ConfusionCounts { per_class }
    }

    pub fn aggregate(&self) -> ClassCounts {
        self.per_class.iter().fold(ClassCounts::default(), |a, &b| a + b)
    }

    /// Mean of the per-class IoUs (macro view, supplementary).
    pub fn macro_iou(&self) -> f64 {
        if self.per_class.is_empty() {
            return 1.0;
        }
        self.per_class.iter().map(ClassCounts::iou).sum::<f64>() / self.per_class.len() as f64
    }

    pub fn metrics(&self) -> MetricVector {
        MetricVector::from_counts(&self.aggregate())
    }
}

impl Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(mut self, o: ConfusionCounts) -> ConfusionCounts {
        self += o;
        self
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: ConfusionCounts) {
        assert_eq!(self.n_classes(), o.n_classes(), "adding counts of different class sets");
        for (a, b) in self.per_class.iter_mut().zip(o.per_class) {
            *a = *a + b;
        }
    }
}

/// Counts `pred` against `gt`, one-vs-rest per class.
pub fn count(pred: &ClassMask, gt: &ClassMask, n_classes: usize) -> Result<ConfusionCounts> {
    if pred.dims() != gt.dims() {
        return Err(Error::DimensionMismatch {
            what: "prediction vs ground truth".into(),
            expected: gt.dims(),
            found: pred.dims(),
        });
    }
    let mut matrix = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        for id in [p, g] {
            if id as usize >= n_classes {
                return Err(Error::ClassOutOfRange { id, n_classes });
            }
        }
        matrix[g as usize][p as usize] += 1;
    }
    Ok(ConfusionCounts::from_matrix(&matrix))
}

/// `TP / (TP + FP)`; with nothing predicted positive, 1.0 if there was also
/// nothing to find and 0.0 otherwise.
pub fn precision(c: &ClassCounts) -> f64 {
    let d = c.tp + c.fp;
    if d == 0 {
        if c.fn_ == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        c.tp as f64 / d as f64
    }
}

/// `TP / (TP + FN)`; with no positives present, 1.0 if none were predicted
/// and 0.0 otherwise.
pub fn recall(c: &ClassCounts) -> f64 {
    let d = c.tp + c.fn_;
    if d == 0 {
        if c.fp == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        c.tp as f64 / d as f64
    }
}

pub fn f1(c: &ClassCounts) -> f64 {
    let (p, r) = (precision(c), recall(c));
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Matthews correlation; 0.0 when any marginal is empty.
pub fn mcc(c: &ClassCounts) -> f64 {
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let d = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if d == 0.0 {
        0.0
    } else {
        (tp * tn - fp * fn_) / d.sqrt()
    }
}

/// `TP / (TP + FP + FN)` on the given counts.
pub fn mean_iou(c: &ClassCounts) -> f64 {
    c.iou()
}

pub fn accuracy(c: &ClassCounts) -> f64 {
    let t = c.total();
    if t == 0 {
        1.0
    } else {
        (c.tp + c.tn) as f64 / t as f64
    }
}

/// True when any of the six metrics fell back to a sentinel.
pub fn is_degenerate(c: &ClassCounts) -> bool {
    c.tp + c.fp == 0 || c.tp + c.fn_ == 0 || c.tn + c.fp == 0 || c.tn + c.fn_ == 0 || c.total() == 0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
    pub mean_iou: f64,
    pub accuracy: f64,
    #[serde(default)]
    pub degenerate: bool,
}

impl MetricVector {
    pub const NAMES: [&'static str; 6] = ["precision", "recall", "f1", "mcc", "mean_iou", "accuracy"];

    pub fn from_counts(c: &ClassCounts) -> Self {
        MetricVector {
            precision: precision(c),
            recall: recall(c),
            f1: f1(c),
            mcc: mcc(c),
            mean_iou: mean_iou(c),
            accuracy: accuracy(c),
            degenerate: is_degenerate(c),
        }
    }

    pub fn values(&self) -> [f64; 6] {
        [
            self.precision,
            self.recall,
            self.f1,
            self.mcc,
            self.mean_iou,
            self.accuracy,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideResult {
    pub slide_id: String,
    pub counts: ConfusionCounts,
    pub metrics: MetricVector,
    /// Per-class mean IoU (extension, not part of the six metrics).
    pub macro_iou: f64,
}

impl SlideResult {
    pub fn new(slide_id: impl Into<String>, counts: ConfusionCounts) -> Self {
        SlideResult {
            slide_id: slide_id.into(),
            metrics: counts.metrics(),
            macro_iou: counts.macro_iou(),
            counts,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }

    /// `"83 (±9)"` in integer percent.
    pub fn render(&self) -> String {
        format!("{} (±{})", percent(self.mean), percent(self.std))
    }
}

/// Rounds a fraction to integer percent, halves rounding up.
pub fn percent(x: f64) -> i64 {
    // the small nudge keeps exact halves like 0.685 (stored as 0.68499..) going up
    (x * 100.0 + 0.5 + 1e-9).floor() as i64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub slides: Vec<SlideResult>,
    /// Mean and std for each of [`MetricVector::NAMES`], in that order.
    pub summary: Vec<MeanStd>,
    pub macro_iou: MeanStd,
    pub degenerate_slides: usize,
}

/// Summarises per-slide results over slides.
pub fn report(label: impl Into<String>, slides: Vec<SlideResult>) -> Result<EvalReport> {
    if slides.is_empty() {
        return Err(Error::Runtime("cannot build a report from zero slides".into()));
    }
    let summary = (0..6)
        .map(|i| MeanStd::of(&slides.iter().map(|s| s.metrics.values()[i]).collect::<Vec<_>>()))
        .collect();
    let macro_iou = MeanStd::of(&slides.iter().map(|s| s.macro_iou).collect::<Vec<_>>());
    let degenerate_slides = slides.iter().filter(|s| s.metrics.degenerate).count();
    Ok(EvalReport {
        label: label.into(),
        slides,
        summary,
        macro_iou,
        degenerate_slides,
    })
}

impl EvalReport {
    pub fn summary_of(&self, metric: &str) -> Option<MeanStd> {
        MetricVector::NAMES
            .iter()
            .position(|&n| n == metric)
            .map(|i| self.summary[i])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    pub const TABLE_HEADER: &'static str =
        "| Model | PPV/Precision | Sensitivity/Recall | Dice/F1 | Matthews | Mean-IoU | Accuracy | Per-class IoU (ext.) |";

    /// One Markdown table row; values in percent with std in parentheses.
    pub fn table_row(&self) -> String {
        let mut row = format!("| {} ", self.label);
        for s in &self.summary {
            let _ = write!(row, "| {} ", s.render());
        }
        let _ = write!(row, "| {} |", self.macro_iou.render());
        row
    }

    /// Markdown table over several reports sharing the column layout.
    pub fn table(reports: &[&EvalReport]) -> String {
        let mut out = String::new();
        out.push_str(Self::TABLE_HEADER);
        out.push('\n');
        out.push_str("|---|---|---|---|---|---|---|---|\n");
        for r in reports {
            out.push_str(&r.table_row());
            out.push('\n');
        }
        let degenerate: usize = reports.iter().map(|r| r.degenerate_slides).sum();
        if degenerate > 0 {
            let _ = writeln!(out, "\n{degenerate} slide(s) hit a division-by-zero sentinel.");
        }
        out
    }
}
