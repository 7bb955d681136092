//! Confusion counts and the binary detection metrics derived from them.

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::Decision;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{predictions} predictions but {truths} truths")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("no samples were counted")]
    Empty,
    #[error("class {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("cannot merge confusion counts over {0} and {1} classes")]
    ClassCountMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Which classes count as attack traffic, and how empty prediction sets
/// are booked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackMapping {
    pub attack: Vec<bool>,
    pub suspicious_as_attack: bool,
}

impl AttackMapping {
    /// Class 0 is benign and every other class is an attack.
    pub fn normal_is_zero(num_classes: usize) -> Self {
        Self {
            attack: (0..num_classes).map(|c| c != 0).collect(),
            suspicious_as_attack: true,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.attack.len()
    }

    pub fn is_attack(&self, class: usize) -> bool {
        self.attack[class]
    }

    pub fn decision_is_attack(&self, d: &Decision) -> bool {
        match d.class() {
            Some(c) => self.attack[c],
            None => self.suspicious_as_attack,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// Rows are true classes. Columns are predicted classes plus a final
    /// column for suspicious decisions.
    pub per_class: Vec<Vec<u64>>,
}

impl ConfusionCounts {
    pub fn new(num_classes: usize) -> Self {
        Self {
            tp: 0,
            tn: 0,
            fp: 0,
            fn_: 0,
            per_class: vec![vec![0; num_classes + 1]; num_classes],
        }
    }

    pub fn from_binary(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Self {
            tp,
            tn,
            fp,
            fn_,
            per_class: Vec::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn suspicious(&self) -> u64 {
        self.per_class.iter().map(|r| *r.last().unwrap_or(&0)).sum()
    }

    pub fn merge(&mut self, other: &ConfusionCounts) -> Result<()> {
        if self.num_classes() != other.num_classes() {
            return Err(MetricsError::ClassCountMismatch(self.num_classes(), other.num_classes()));
        }
        *self += other;
        Ok(())
    }
}

impl AddAssign<&ConfusionCounts> for ConfusionCounts {
    /// Panics if the class counts differ; use [`ConfusionCounts::merge`]
    /// for a checked merge.
    fn add_assign(&mut self, other: &ConfusionCounts) {
        assert_eq!(self.num_classes(), other.num_classes());
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

pub fn confusion(predictions: &[Decision], truths: &[usize], mapping: &AttackMapping) -> Result<ConfusionCounts> {
    if predictions.len() != truths.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            truths: truths.len(),
        });
    }
    let k = mapping.num_classes();
    let mut c = ConfusionCounts::new(k);
    for (d, &y) in predictions.iter().zip(truths) {
        if y >= k {
            return Err(MetricsError::ClassOutOfRange { class: y, num_classes: k });
        }
        let col = match d.class() {
            Some(p) if p >= k => return Err(MetricsError::ClassOutOfRange { class: p, num_classes: k }),
            Some(p) => p,
            None => k,
        };
        c.per_class[y][col] += 1;
        match (mapping.is_attack(y), mapping.decision_is_attack(d)) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Metrics whose denominator was zero. Those fields are reported as 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Degenerate {
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
    pub fpr: bool,
}

impl Degenerate {
    pub fn any(&self) -> bool {
        self.precision || self.recall || self.f1 || self.fpr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub degenerate: Degenerate,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn classification_metrics(c: &ConfusionCounts) -> Result<ClassificationMetrics> {
    let total = c.total();
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    let accuracy = (c.tp + c.tn) as f64 / total as f64;
    let (precision, dp) = ratio(c.tp, c.tp + c.fp);
    let (recall, dr) = ratio(c.tp, c.tp + c.fn_);
    let (fpr, dfpr) = ratio(c.fp, c.fp + c.tn);
    let (fnr, _) = ratio(c.fn_, c.tp + c.fn_);
    let (f1, df) = if precision + recall > 0.0 {
        (2.0 * precision * recall / (precision + recall), false)
    } else {
        (0.0, true)
    };
    Ok(ClassificationMetrics {
        accuracy,
        precision,
        recall,
        f1,
        tpr: recall,
        fpr,
        fnr,
        degenerate: Degenerate {
            precision: dp,
            recall: dr,
            f1: df,
            fpr: dfpr,
        },
    })
}

/// One-vs-rest precision, recall and F1 for every class, from the
/// multiclass matrix. Suspicious decisions count as misses for every class.
pub fn one_vs_rest(c: &ConfusionCounts) -> Vec<(f64, f64, f64)> {
    let k = c.num_classes();
    (0..k)
        .map(|class| {
            let tp = c.per_class[class][class];
            let support: u64 = c.per_class[class].iter().sum();
            let predicted: u64 = c.per_class.iter().map(|r| r[class]).sum();
            let (p, _) = ratio(tp, predicted);
            let (r, _) = ratio(tp, support);
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            (p, r, f)
        })
        .collect()
}

/// Area under a piecewise-linear (fpr, tpr) curve. Points are sorted by
/// fpr then tpr before integration.
pub fn trapezoid_auc(points: &[(f64, f64)]) -> f64 {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}
