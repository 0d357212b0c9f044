//! Classification metrics.

use alloc::vec;

use crate::{Error, Result};

/// `counts[true][pred]`.
pub fn confusion(labels: &[usize], preds: &[usize], n_classes: usize) -> alloc::vec::Vec<alloc::vec::Vec<usize>> {
    let mut counts = vec![vec![0usize; n_classes]; n_classes];
    for (&y, &p) in labels.iter().zip(preds) {
        counts[y][p] += 1;
    }
    counts
}

pub fn accuracy(labels: &[usize], preds: &[usize]) -> Result<f64> {
    check(labels, preds)?;
    let hits = labels.iter().zip(preds).filter(|(y, p)| y == p).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Unweighted mean of per-class F1; a class with no predictions and no
/// support, or a zero denominator, contributes 0.
pub fn macro_f1(labels: &[usize], preds: &[usize], n_classes: usize) -> Result<f64> {
    check(labels, preds)?;
    if n_classes == 0 {
        return Err(Error::Evaluation("zero classes".into()));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fneg = vec![0usize; n_classes];
    for (&y, &p) in labels.iter().zip(preds) {
        if y >= n_classes || p >= n_classes {
            return Err(Error::Evaluation(alloc::format!(
                "label {y} or prediction {p} out of range for {n_classes} classes"
            )));
        }
        if y == p {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fneg[y] += 1;
        }
    }
    let total: f64 = (0..n_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fneg[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / n_classes as f64)
}

fn check(labels: &[usize], preds: &[usize]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Evaluation("empty test set".into()));
    }
    if labels.len() != preds.len() {
        return Err(Error::Evaluation(alloc::format!(
            "{} labels vs {} predictions",
            labels.len(),
            preds.len()
        )));
    }
    Ok(())
}
