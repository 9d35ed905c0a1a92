use num_rational::Ratio;
use proptest::prelude::*;

use ovafuse_core::metrics::{compute_metrics, confusion, ConfusionMatrix, UndefinedMetric};
use ovafuse_core::ClassLabel;

fn label(positive: bool) -> ClassLabel {
    if positive {
        ClassLabel::Infected
    } else {
        ClassLabel::NotInfected
    }
}

/// Brute-force tally and textbook definitions, kept apart from the library code.
fn oracle(pred: &[bool], truth: &[bool]) -> (Ratio<u64>, Option<Ratio<u64>>, Option<Ratio<u64>>, Option<Ratio<u64>>) {
    let n = pred.len() as u64;
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count() as u64;
    let predicted_pos = pred.iter().filter(|p| **p).count() as u64;
    let actual_pos = truth.iter().filter(|t| **t).count() as u64;
    let tp = pred.iter().zip(truth).filter(|(p, t)| **p && **t).count() as u64;
    let precision = (predicted_pos > 0).then(|| Ratio::new(tp, predicted_pos));
    let recall = (actual_pos > 0).then(|| Ratio::new(tp, actual_pos));
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > Ratio::from_integer(0) => Some(Ratio::from_integer(2) * p * r / (p + r)),
        _ if predicted_pos + actual_pos > 0 => Some(Ratio::from_integer(0)),
        _ => None,
    };
    (Ratio::new(correct, n), precision, recall, f1)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]

    #[test]
    fn exact_metrics_match_brute_force(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..200)) {
        let (pred, truth): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let cm = confusion(
            &pred.iter().map(|&p| label(p)).collect::<Vec<_>>(),
            &truth.iter().map(|&t| label(t)).collect::<Vec<_>>(),
        )
        .unwrap();
        prop_assert_eq!(cm.total(), pred.len() as u64);
        let r = compute_metrics::<Ratio<u64>>(&cm, "m");
        let (acc, precision, recall, f1) = oracle(&pred, &truth);
        let zero = Ratio::from_integer(0);
        prop_assert_eq!(r.accuracy, acc);
        prop_assert_eq!(r.precision, precision.unwrap_or(zero));
        prop_assert_eq!(r.recall, recall.unwrap_or(zero));
        prop_assert_eq!(r.f1, f1.unwrap_or(zero));
        prop_assert_eq!(r.undefined.contains(&UndefinedMetric::Precision), precision.is_none());
        prop_assert_eq!(r.undefined.contains(&UndefinedMetric::Recall), recall.is_none());

        let float = compute_metrics::<f64>(&cm, "m");
        let as_f64 = |q: Ratio<u64>| *q.numer() as f64 / *q.denom() as f64;
        prop_assert!((float.f1 - as_f64(r.f1)).abs() <= 1e-12);
        prop_assert!((float.accuracy - as_f64(r.accuracy)).abs() <= 1e-12);
    }
}

#[test]
fn reference_matrix_gives_2280_over_2314() {
    let cm = ConfusionMatrix { tp: 1140, fp: 33, fn_: 1, tn: 748 };
    let r = compute_metrics::<Ratio<u64>>(&cm, "denconrest");
    assert_eq!(r.f1, Ratio::new(2280, 2314));
    assert_eq!(r.accuracy, Ratio::new(1888, 1922));
    assert_eq!(r.precision, Ratio::new(1140, 1173));
    assert_eq!(r.recall, Ratio::new(1140, 1141));
}
