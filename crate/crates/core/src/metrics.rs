//! Top-1 accuracy and macro F1.

use crate::error::{Result, SnnError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<u64>>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Classes with zero precision and recall score F1 = 0.
pub fn evaluate(preds: &[usize], labels: &[usize], class_count: usize) -> Result<MetricsReport> {
    if preds.len() != labels.len() {
        return Err(SnnError::invalid(
            "evaluate",
            format!("{} predictions for {} labels", preds.len(), labels.len()),
        ));
    }
    if preds.is_empty() || class_count == 0 {
        return Err(SnnError::invalid("evaluate", "nothing to evaluate"));
    }
    let mut confusion = vec![vec![0u64; class_count]; class_count];
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= class_count || t >= class_count {
            return Err(SnnError::invalid(
                "evaluate",
                format!("class index {} outside [0, {class_count})", p.max(t)),
            ));
        }
        confusion[t][p] += 1;
    }
    let correct: u64 = (0..class_count).map(|k| confusion[k][k]).sum();
    let per_class: Vec<ClassMetrics> = (0..class_count)
        .map(|k| {
            let tp = confusion[k][k];
            let predicted: u64 = confusion.iter().map(|row| row[k]).sum();
            let support: u64 = confusion[k].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / class_count as f64;
    Ok(MetricsReport {
        accuracy: ratio(correct, preds.len() as u64),
        macro_f1,
        per_class,
        confusion,
    })
}
