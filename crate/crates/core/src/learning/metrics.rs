use crate::error::{Error, Result};

use super::{Example, Head, Model};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Regression only, cm³.
    pub l1_mean: Option<f64>,
    pub l1_std: Option<f64>,
}

/// Confusion-matrix metrics with `score >= threshold` counted as positive.
/// Precision and recall are 0 when undefined.
pub fn classifier_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Metrics {
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (s, &l) in scores.iter().zip(labels) {
        match (*s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Metrics {
        accuracy: ratio(tp + tn, tp + fp + tn + fn_),
        precision,
        recall,
        f1,
        l1_mean: None,
        l1_std: None,
    }
}

/// Mean and population standard deviation of `|predicted − true|`.
pub fn regressor_metrics(predicted: &[f64], truth: &[f64]) -> (f64, f64) {
    let n = predicted.len().max(1) as f64;
    let errs: Vec<f64> = predicted.iter().zip(truth).map(|(p, t)| (p - t).abs()).collect();
    let mean = errs.iter().sum::<f64>() / n;
    let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn evaluate_classifier(model: &Model, data: &[Example], threshold: f64) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    if model.spec().head != Head::Classifier {
        return Err(Error::Spec("classifier metrics need a classifier head".into()));
    }
    let inputs: Vec<_> = data.iter().map(|e| e.input.clone()).collect();
    let scores = model.predict(&inputs)?;
    let labels: Vec<bool> = data.iter().map(|e| e.label).collect();
    Ok(classifier_metrics(&scores, &labels, threshold))
}

/// L1 volume error, plus classification metrics from thresholding the
/// predicted volume at `threshold` cm³.
pub fn evaluate_regressor(model: &Model, data: &[Example], threshold: f64) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    if model.spec().head != Head::Regressor {
        return Err(Error::Spec("regression metrics need a regressor head".into()));
    }
    let inputs: Vec<_> = data.iter().map(|e| e.input.clone()).collect();
    let pred = model.predict(&inputs)?;
    let truth: Vec<f64> = data.iter().map(|e| e.volume).collect();
    let labels: Vec<bool> = data.iter().map(|e| e.label).collect();
    let (mean, std) = regressor_metrics(&pred, &truth);
    Ok(Metrics {
        l1_mean: Some(mean),
        l1_std: Some(std),
        ..classifier_metrics(&pred, &labels, threshold)
    })
}
