use ndarray::{array, Array2};
use netresil_core::eval::{
    classification_metrics, count_predictions, median_pair_score, regression_metrics, ClassificationCounts,
    MetricSummary,
};
use proptest::prelude::*;

fn counts(tp: u64, tn: u64, fp: u64, fn_: u64) -> ClassificationCounts {
    ClassificationCounts { tp, tn, fp, fn_ }
}

#[test]
fn classification_examples() {
    let m = classification_metrics(&counts(3, 4, 1, 2));
    assert_eq!(m.acc, 0.7);
    assert_eq!(m.precision, 0.75);
    assert_eq!(m.recall, 0.6);
    assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
    assert!(m.degenerate.is_empty());

    let none_predicted = classification_metrics(&counts(0, 5, 0, 5));
    assert_eq!(none_predicted.precision, 0.0);
    assert_eq!(none_predicted.f1, 0.0);
    assert_eq!(none_predicted.degenerate, vec!["precision".to_string(), "f1".to_string()]);

    let empty = classification_metrics(&counts(0, 0, 0, 0));
    assert_eq!(empty.degenerate.len(), 4);
}

#[test]
fn reference_classification_examples() {
    let perfect = classification_metrics(&counts(5, 5, 0, 0));
    assert_eq!((perfect.acc, perfect.f1), (1.0, 1.0));

    let wrong = classification_metrics(&counts(0, 0, 5, 5));
    assert_eq!((wrong.acc, wrong.precision, wrong.recall, wrong.f1), (0.0, 0.0, 0.0, 0.0));
    assert_eq!(wrong.degenerate, vec!["f1".to_string()]);

    let m = classification_metrics(&counts(2, 6, 1, 1));
    assert!((m.acc - 0.8).abs() < 1e-12);
    for v in [m.precision, m.recall, m.f1] {
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn regression_examples() {
    let u = array![[0.5, 1.5], [2.0, -1.0]];
    let r = regression_metrics(&u, &u).unwrap();
    assert_eq!((r.mae, r.rmse), (0.0, 0.0));
    let r = regression_metrics(&(&u + 1.0), &u).unwrap();
    assert!((r.mae - 1.0).abs() < 1e-12 && (r.rmse - 1.0).abs() < 1e-12);

    let pred = array![[1.0], [3.0]];
    let truth = array![[0.0], [0.0]];
    let r = regression_metrics(&pred, &truth).unwrap();
    assert_eq!(r.mae, 2.0);
    assert!((r.rmse - 5f64.sqrt()).abs() < 1e-15);
    assert_eq!(r.rmse_paper, 2.0);

    let r = regression_metrics(&array![[3.0, 4.0]], &array![[0.0, 0.0]]).unwrap();
    assert_eq!(r.rmse_paper, 5.0);
    assert!(regression_metrics(&array![[1.0]], &array![[1.0, 2.0]]).is_err());
}

#[test]
fn swapping_labels_preserves_accuracy_but_not_f1() {
    let c = counts(6, 1, 2, 1);
    let swapped = counts(c.tn, c.tp, c.fn_, c.fp);
    let (a, b) = (classification_metrics(&c), classification_metrics(&swapped));
    assert_eq!(a.acc, b.acc);
    assert!((a.f1 - b.f1).abs() > 0.1);
}

#[test]
fn metric_summary_statistics() {
    let s = MetricSummary::from_values(vec![0.8, 1.0]);
    assert!((s.mean - 0.9).abs() < 1e-15);
    assert!((s.std.unwrap() - 0.02f64.sqrt()).abs() < 1e-15);
    assert!(!s.degenerate);

    let single = MetricSummary::from_values(vec![0.7]);
    assert_eq!(single.std, None);
    assert!(single.degenerate);
    assert_eq!(single.display(2), "0.70");
    let json = serde_json::to_value(&single).unwrap();
    assert!(json["std"].is_null());
}

#[test]
fn constant_and_oracle_predictors() {
    let pos = vec![(0, 1), (1, 2), (2, 3)];
    let neg = vec![(0, 2), (0, 3), (1, 3)];
    let half = Array2::from_elem((4, 4), 0.5);
    let m = classification_metrics(&count_predictions(&half, &pos, &neg, 0.5));
    assert_eq!(m.recall, 1.0);
    assert_eq!(m.precision, 0.5);

    let mut oracle = Array2::zeros((4, 4));
    for &(i, j) in &pos {
        oracle[[i, j]] = 1.0;
    }
    let m = classification_metrics(&count_predictions(&oracle, &pos, &neg, 0.5));
    assert_eq!(m.f1, 1.0);
    assert_eq!(m.acc, 1.0);
}

#[test]
fn median_pair_score_examples() {
    let s = array![[0.0, 0.1, 0.4], [0.1, 0.0, 0.3], [0.4, 0.3, 0.0]];
    assert_eq!(median_pair_score(&s, &[(0, 1), (0, 2), (1, 2)]), 0.3);
    assert!((median_pair_score(&s, &[(0, 1), (0, 2)]) - 0.25).abs() < 1e-15);
}

proptest! {
    #[test]
    fn rmse_dominates_mae(values in prop::collection::vec(-100.0f64..100.0, 1..40)) {
        let n = values.len();
        let pred = Array2::from_shape_vec((n, 1), values).unwrap();
        let r = regression_metrics(&pred, &Array2::zeros((n, 1))).unwrap();
        prop_assert!(r.rmse + 1e-12 >= r.mae);
    }

    #[test]
    fn classification_metrics_lie_in_unit_interval(tp in 0u64..50, tn in 0u64..50, fp in 0u64..50, fn_ in 0u64..50) {
        let m = classification_metrics(&counts(tp, tn, fp, fn_));
        for v in [m.acc, m.precision, m.recall, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
