//! Multi-label evaluation: example-based accuracy / precision / recall and
//! globally pooled micro-F1.
//!
//! Definitions are pinned here because the evaluation protocol upstream names
//! the metrics without defining them: accuracy is the per-sample Jaccard
//! index (subset accuracy available behind a flag), precision and recall are
//! example-based means, micro-F1 pools true/false positives and false
//! negatives over every (sample, label) cell. Empty-set conventions:
//! `|Y∪Ŷ|=0 → 1`, `|Ŷ|=0 → 1 if |Y|=0 else 0`, `|Y|=0 → recall 1`, and an
//! all-zero micro-F1 denominator scores 0.

use alloc::vec::Vec;
use core::fmt;

/// Probabilities at or above this threshold count as predicted-positive.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub enum MetricsError {
    EmptyBatch,
    ShapeMismatch { rows: usize, expected: usize, got: usize },
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::EmptyBatch => write!(f, "metrics over an empty batch"),
            MetricsError::ShapeMismatch {
                rows,
                expected,
                got,
            } => write!(
                f,
                "metrics row {rows}: expected {expected} labels, got {got}"
            ),
        }
    }
}

impl core::error::Error for MetricsError {}

/// Which accuracy definition `evaluate` reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccuracyKind {
    /// Mean per-sample `|Y∩Ŷ| / |Y∪Ŷ|`.
    Jaccard,
    /// Fraction of samples predicted exactly.
    Subset,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub micro_f1: f64,
}

pub fn binarize(probs: &[Vec<f64>], threshold: f64) -> Vec<Vec<bool>> {
    probs
        .iter()
        .map(|row| row.iter().map(|p| *p >= threshold).collect())
        .collect()
}

fn check_shapes(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> Result<(), MetricsError> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(MetricsError::EmptyBatch);
    }
    let l = truth[0].len();
    for (i, (p, t)) in pred.iter().zip(truth).enumerate() {
        if p.len() != l || t.len() != l {
            return Err(MetricsError::ShapeMismatch {
                rows: i,
                expected: l,
                got: if p.len() != l { p.len() } else { t.len() },
            });
        }
    }
    Ok(())
}

/// Mean per-sample Jaccard index; both-empty scores 1.
pub fn example_accuracy(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> Result<f64, MetricsError> {
    check_shapes(pred, truth)?;
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        let inter = p.iter().zip(t).filter(|(a, b)| **a && **b).count();
        let union = p.iter().zip(t).filter(|(a, b)| **a || **b).count();
        total += if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
    }
    Ok(total / pred.len() as f64)
}

/// Fraction of samples whose prediction matches the truth exactly.
pub fn subset_accuracy(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> Result<f64, MetricsError> {
    check_shapes(pred, truth)?;
    let exact = pred
        .iter()
        .zip(truth)
        .filter(|(p, t)| p.iter().zip(t.iter()).all(|(a, b)| a == b))
        .count();
    Ok(exact as f64 / pred.len() as f64)
}

/// Example-based `(precision, recall)` means.
pub fn example_precision_recall(
    pred: &[Vec<bool>],
    truth: &[Vec<bool>],
) -> Result<(f64, f64), MetricsError> {
    check_shapes(pred, truth)?;
    let mut precision = 0.0;
    let mut recall = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        let inter = p.iter().zip(t).filter(|(a, b)| **a && **b).count() as f64;
        let predicted = p.iter().filter(|a| **a).count() as f64;
        let actual = t.iter().filter(|a| **a).count() as f64;
        precision += if predicted == 0.0 {
            if actual == 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            inter / predicted
        };
        recall += if actual == 0.0 { 1.0 } else { inter / actual };
    }
    let n = pred.len() as f64;
    Ok((precision / n, recall / n))
}

/// `2·TP / (2·TP + FP + FN)` pooled over every cell; zero denominator → 0.
pub fn micro_f1(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> Result<f64, MetricsError> {
    check_shapes(pred, truth)?;
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for (p, t) in pred.iter().zip(truth) {
        for (a, b) in p.iter().zip(t) {
            match (a, b) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    })
}

/// Full report from probabilities at the standard threshold.
pub fn evaluate(
    probs: &[Vec<f64>],
    truth: &[Vec<bool>],
    accuracy_kind: AccuracyKind,
) -> Result<EvalReport, MetricsError> {
    let pred = binarize(probs, DECISION_THRESHOLD);
    let accuracy = match accuracy_kind {
        AccuracyKind::Jaccard => example_accuracy(&pred, truth)?,
        AccuracyKind::Subset => subset_accuracy(&pred, truth)?,
    };
    let (precision, recall) = example_precision_recall(&pred, truth)?;
    let micro_f1 = micro_f1(&pred, truth)?;
    Ok(EvalReport {
        accuracy,
        precision,
        recall,
        micro_f1,
    })
}
