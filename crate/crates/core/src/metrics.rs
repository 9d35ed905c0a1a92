//! Confusion matrix and the four summary metrics, positive class = `infected`.
//!
//! Metrics are computed from exact integer counts and are generic over the output
//! scalar, so they can be evaluated in floating point or as exact rationals.

use num_traits::{FromPrimitive, Num};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::label::ClassLabel;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("length mismatch: {predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("no records to evaluate")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, prediction: ClassLabel, label: ClassLabel) {
        match (prediction.is_positive(), label.is_positive()) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    /// Same outcomes with `notinfected` treated as the positive class.
    pub fn swap_positive(&self) -> ConfusionMatrix {
        ConfusionMatrix {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }
}

pub fn confusion(predictions: &[ClassLabel], labels: &[ClassLabel]) -> Result<ConfusionMatrix, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        cm.add(p, l);
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UndefinedMetric {
    Precision,
    Recall,
    F1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport<T> {
    pub model_id: String,
    pub accuracy: T,
    pub precision: T,
    pub recall: T,
    pub f1: T,
    pub confusion: ConfusionMatrix,
    /// Metrics whose denominator was zero; they are reported as 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<UndefinedMetric>,
}

fn ratio<T: Num + FromPrimitive>(num: u64, den: u64) -> Option<T> {
    (den != 0).then(|| T::from_u64(num).expect("representable") / T::from_u64(den).expect("representable"))
}

/// Accuracy, precision, recall and F1 from counts.
///
/// `f1` is evaluated as `2tp / (2tp + fp + fn)`, which equals the harmonic mean of
/// precision and recall whenever that is defined.
///
/// # Panics
/// If the matrix is empty.
pub fn compute_metrics<T: Num + FromPrimitive + Clone>(cm: &ConfusionMatrix, model_id: impl Into<String>) -> MetricsReport<T> {
    assert!(cm.total() > 0, "confusion matrix is empty");
    let mut undefined = Vec::new();
    let mut or_zero = |value: Option<T>, which| {
        value.unwrap_or_else(|| {
            undefined.push(which);
            T::zero()
        })
    };
    let precision = or_zero(ratio(cm.tp, cm.tp + cm.fp), UndefinedMetric::Precision);
    let recall = or_zero(ratio(cm.tp, cm.tp + cm.fn_), UndefinedMetric::Recall);
    let f1 = or_zero(ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn_), UndefinedMetric::F1);
    MetricsReport {
        model_id: model_id.into(),
        accuracy: ratio(cm.tp + cm.tn, cm.total()).expect("nonempty"),
        precision,
        recall,
        f1,
        confusion: *cm,
        undefined,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;
    use ClassLabel::{Infected as I, NotInfected as N};

    #[test]
    fn confusion_errors_and_perfect_classifier() {
        assert_eq!(confusion(&[I], &[]), Err(MetricsError::LengthMismatch { predictions: 1, labels: 0 }));
        assert_eq!(confusion(&[], &[]), Err(MetricsError::EmptyInput));
        let labels = [I, N, N, I, I];
        let cm = confusion(&labels, &labels).unwrap();
        assert_eq!((cm.fp, cm.fn_), (0, 0));
        let r: MetricsReport<f64> = compute_metrics(&cm, "m");
        assert_eq!((r.accuracy, r.precision, r.recall, r.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn hand_tally() {
        // right, wrong, right, wrong
        let labels = [I, I, N, N];
        let preds = [I, N, N, I];
        let cm = confusion(&preds, &labels).unwrap();
        assert_eq!(cm, ConfusionMatrix { tp: 1, fp: 1, fn_: 1, tn: 1 });
        let r: MetricsReport<f64> = compute_metrics(&cm, "m");
        assert_eq!((r.accuracy, r.precision, r.recall, r.f1), (0.5, 0.5, 0.5, 0.5));
    }

    #[test]
    fn exact_rational_metrics() {
        let cm = ConfusionMatrix { tp: 1140, fp: 33, fn_: 1, tn: 748 };
        let r: MetricsReport<Ratio<i64>> = compute_metrics(&cm, "hybrid");
        assert_eq!(r.f1, Ratio::new(2280, 2314));
        assert_eq!(r.accuracy, Ratio::new(1888, 1922));
        assert_eq!(r.recall, Ratio::new(1140, 1141));
    }

    #[test]
    fn zero_denominators_are_flagged() {
        let cm = ConfusionMatrix { tp: 0, fp: 0, fn_: 0, tn: 5 };
        let r: MetricsReport<f64> = compute_metrics(&cm, "m");
        assert_eq!(r.accuracy, 1.0);
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        assert_eq!(r.undefined, [UndefinedMetric::Precision, UndefinedMetric::Recall, UndefinedMetric::F1]);
    }

    #[test]
    fn json_field_names() {
        let cm = ConfusionMatrix { tp: 1, fp: 2, fn_: 3, tn: 4 };
        let v = serde_json::to_value(compute_metrics::<f64>(&cm, "m")).unwrap();
        assert_eq!(v["confusion"]["fn"], 3);
        assert!(v.get("undefined").is_none());
    }
}
