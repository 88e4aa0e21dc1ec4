//! Classification metrics (accuracy, macro-F1, answer inclusion rate,
//! throughput), per-class reports, and significance tests.
//!
//! Metric conventions, chosen once and used everywhere:
//!
//! * a prediction with no parsed label is simply wrong for accuracy and
//!   joins the confusion matrix as a synthetic no-answer class that is
//!   excluded from the macro-F1 average, keeping macro-F1 comparable
//!   between approaches with and without parse failures;
//! * the macro-F1 label universe is the union of gold and predicted
//!   labels, so classes absent from the evaluation slice do not dilute
//!   the average;
//! * throughput is wall-clock samples per second measured over input
//!   construction plus prediction, excluding model load.

pub mod significance;
pub mod special;

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

use crate::approaches::{ApproachError, Classifier, Prediction};
use crate::backend::Backend;
use crate::corpus::{EditSample, LabelSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metrics need at least one sample")]
    Empty,
    #[error("prediction and gold counts differ: {preds} vs {golds}")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("sample {edit_id} has no gold label")]
    MissingGold { edit_id: String },
    #[error(transparent)]
    Approach(#[from] ApproachError),
}

/// Precision, recall, and F1 for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Aggregate evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub air: f64,
    /// Samples per second of wall-clock time; 0 when not measured.
    pub throughput: f64,
    pub per_class: Vec<ClassMetrics>,
}

/// Fraction of predictions matching their gold label. Predictions without
/// a parsed label count as incorrect.
pub fn accuracy(preds: &[Prediction], golds: &[String]) -> Result<f64, EvalError> {
    check_lengths(preds, golds)?;
    let correct = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| p.label.as_deref() == Some(g.as_str()))
        .count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Fraction of predictions that contained any label at all.
pub fn air(preds: &[Prediction]) -> Result<f64, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let included = preds.iter().filter(|p| p.answer_included).count();
    Ok(included as f64 / preds.len() as f64)
}

fn check_lengths(preds: &[Prediction], golds: &[String]) -> Result<(), EvalError> {
    if preds.len() != golds.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// The evaluation label universe: every label occurring in golds or in
/// parsed predictions, ordered by the label set (set members first, in set
/// order) with any stray strings appended in first-appearance order.
fn label_universe(preds: &[Prediction], golds: &[String], labels: &LabelSet) -> Vec<String> {
    let occurs = |name: &str| {
        golds.iter().any(|g| g == name)
            || preds.iter().any(|p| p.label.as_deref() == Some(name))
    };
    let mut universe: Vec<String> = labels
        .names()
        .iter()
        .filter(|n| occurs(n))
        .cloned()
        .collect();
    let mut push_stray = |name: &str| {
        if !universe.iter().any(|u| u == name) {
            universe.push(name.to_string());
        }
    };
    for g in golds {
        if !labels.contains(g) {
            push_stray(g);
        }
    }
    for p in preds {
        if let Some(l) = &p.label {
            if !labels.contains(l) {
                push_stray(l);
            }
        }
    }
    universe
}

/// Per-class precision/recall/F1 over the label universe. A class with no
/// predicted samples has precision 0; one with no gold samples has recall
/// 0; F1 is 0 whenever precision + recall is 0.
pub fn per_class(
    preds: &[Prediction],
    golds: &[String],
    labels: &LabelSet,
) -> Result<Vec<ClassMetrics>, EvalError> {
    check_lengths(preds, golds)?;
    let universe = label_universe(preds, golds, labels);
    let mut rows = Vec::with_capacity(universe.len());
    for class in &universe {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (p, g) in preds.iter().zip(golds) {
            let predicted = p.label.as_deref() == Some(class.as_str());
            let gold = g == class;
            match (predicted, gold) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let precision = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fn_ == 0 {
            0.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        rows.push(ClassMetrics {
            label: class.clone(),
            precision,
            recall,
            f1,
        });
    }
    Ok(rows)
}

/// Unweighted mean of per-class F1 over the label universe. Predictions
/// without a label depress the recall of their gold class but do not add a
/// class of their own.
pub fn macro_f1(preds: &[Prediction], golds: &[String], labels: &LabelSet) -> Result<f64, EvalError> {
    let rows = per_class(preds, golds, labels)?;
    if rows.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(rows.iter().map(|r| r.f1).sum::<f64>() / rows.len() as f64)
}

/// Assembles a [`MetricsReport`] from already-computed predictions.
pub fn report(
    preds: &[Prediction],
    golds: &[String],
    labels: &LabelSet,
    throughput: f64,
) -> Result<MetricsReport, EvalError> {
    Ok(MetricsReport {
        n: preds.len(),
        accuracy: accuracy(preds, golds)?,
        macro_f1: macro_f1(preds, golds, labels)?,
        air: air(preds)?,
        throughput,
        per_class: per_class(preds, golds, labels)?,
    })
}

/// Runs a classifier over labeled samples and measures throughput across
/// input construction plus prediction.
pub fn evaluate_batch(
    classifier: &Classifier,
    backend: &mut dyn Backend,
    samples: &[EditSample],
) -> Result<(MetricsReport, Vec<Prediction>), EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut golds = Vec::with_capacity(samples.len());
    for sample in samples {
        golds.push(sample.intent.clone().ok_or_else(|| EvalError::MissingGold {
            edit_id: sample.edit_id.clone(),
        })?);
    }
    let start = Instant::now();
    let mut preds = Vec::with_capacity(samples.len());
    for sample in samples {
        preds.push(classifier.predict(backend, sample)?);
    }
    let elapsed = start.elapsed().as_secs_f64();
    let throughput = if elapsed > 0.0 {
        samples.len() as f64 / elapsed
    } else {
        f64::INFINITY
    };
    let report = report(&preds, &golds, &classifier.task.labels, throughput)?;
    Ok((report, preds))
}

/// Confusion counts keyed by (gold, predicted-or-none), mainly for
/// diagnostics and tests.
pub fn confusion_counts(
    preds: &[Prediction],
    golds: &[String],
) -> BTreeMap<(String, Option<String>), usize> {
    let mut counts = BTreeMap::new();
    for (p, g) in preds.iter().zip(golds) {
        *counts.entry((g.clone(), p.label.clone())).or_insert(0) += 1;
    }
    counts
}
