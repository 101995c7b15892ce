use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Classification quality over one set of predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Unweighted mean of per-class F1.
    pub uf1: f64,
    /// Unweighted mean of per-class recall.
    pub uar: f64,
    pub accuracy: f64,
    pub per_class_f1: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub samples: usize,
}

/// Metrics of `preds` against `labels` over `num_classes` classes.
///
/// A class with no true samples contributes recall 0 and F1 0 to the means.
pub fn compute_metrics(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<Metrics> {
    if preds.len() != labels.len() {
        return Err(Error::usage(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if num_classes == 0 {
        return Err(Error::usage("metrics need at least one class"));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::usage(format!("class index out of range: predicted {p}, true {t}")));
        }
        confusion[t][p] += 1;
    }
    Ok(from_confusion(confusion))
}

/// Metrics of an existing confusion matrix (`[true][predicted]`).
pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Metrics {
    let k = confusion.len();
    let samples: usize = confusion.iter().flatten().sum();
    let mut per_class_f1 = Vec::with_capacity(k);
    let mut per_class_recall = Vec::with_capacity(k);
    let mut correct = 0;
    for c in 0..k {
        let tp = confusion[c][c];
        let actual: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        correct += tp;
        per_class_recall.push(if actual == 0 { 0.0 } else { tp as f64 / actual as f64 });
        per_class_f1.push(if actual == 0 || actual + predicted == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (actual + predicted) as f64
        });
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / k as f64;
    Metrics {
        uf1: mean(&per_class_f1),
        uar: mean(&per_class_recall),
        accuracy: if samples == 0 { 0.0 } else { correct as f64 / samples as f64 },
        per_class_f1,
        per_class_recall,
        confusion,
        samples,
    }
}

/// Sum of several confusion matrices of equal size.
pub fn pool_confusion<'a>(matrices: impl IntoIterator<Item = &'a Vec<Vec<usize>>>, num_classes: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0usize; num_classes]; num_classes];
    for m in matrices {
        for (row, src) in out.iter_mut().zip(m) {
            for (a, b) in row.iter_mut().zip(src) {
                *a += b;
            }
        }
    }
    out
}
