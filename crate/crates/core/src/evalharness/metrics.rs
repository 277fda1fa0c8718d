use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-class counts and the three summary scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub uar: f64,
    pub uf1: f64,
    pub classes: usize,
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
    /// Ground-truth count per class.
    pub n: Vec<usize>,
}

impl MetricsReport {
    pub fn total(&self) -> usize {
        self.n.iter().sum()
    }

    pub fn correct(&self) -> usize {
        self.tp.iter().sum()
    }
}

/// Accuracy, unweighted average recall and unweighted F1 over `classes`
/// classes. A class with no samples contributes 0 to both macro averages.
pub fn compute_metrics(labels: &[usize], predictions: &[usize], classes: usize) -> Result<MetricsReport> {
    if labels.len() != predictions.len() {
        return Err(Error::Invalid(format!(
            "{} labels but {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    if classes == 0 {
        return Err(Error::Invalid("class count must be positive".into()));
    }
    if let Some(bad) = labels.iter().chain(predictions).find(|&&c| c >= classes) {
        return Err(Error::Invalid(format!("class {bad} out of range for {classes} classes")));
    }
    let mut tp = vec![0; classes];
    let mut fp = vec![0; classes];
    let mut fn_ = vec![0; classes];
    let mut n = vec![0; classes];
    for (&y, &p) in labels.iter().zip(predictions) {
        n[y] += 1;
        if y == p {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let total = labels.len();
    let acc = if total == 0 {
        0.0
    } else {
        tp.iter().sum::<usize>() as f64 / total as f64
    };
    let mut recall_sum = 0.0;
    let mut f1_sum = 0.0;
    for c in 0..classes {
        if n[c] > 0 {
            recall_sum += tp[c] as f64 / n[c] as f64;
        }
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        if denom > 0 {
            f1_sum += 2.0 * tp[c] as f64 / denom as f64;
        }
    }
    Ok(MetricsReport {
        acc,
        uar: recall_sum / classes as f64,
        uf1: f1_sum / classes as f64,
        classes,
        tp,
        fp,
        fn_,
        n,
    })
}
