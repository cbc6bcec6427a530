mod common;

use proptest::prelude::*;

use tlmk::trainer::{classification_metrics, confusion_matrix, mcc, regression_metrics, spearman};

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(100) })]

    #[test]
    fn mcc_matches_covariance_definition(
        k in 2usize..6,
        pairs in prop::collection::vec((0usize..6, 0usize..6), 2..80),
    ) {
        let pred: Vec<usize> = pairs.iter().map(|p| p.0 % k).collect();
        let truth: Vec<usize> = pairs.iter().map(|p| p.1 % k).collect();
        let got = classification_metrics(&pred, &truth, k).unwrap().mcc.unwrap();
        prop_assert!((got - common::mcc_oracle(&pred, &truth, k)).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&got));
    }

    #[test]
    fn spearman_matches_rank_then_pearson(
        pairs in prop::collection::vec((0i32..10, -50i32..50), 2..80),
    ) {
        let a: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1 as f64 / 7.0).collect();
        let got = spearman(&a, &b).unwrap();
        prop_assert!((got - common::scc_oracle(&a, &b)).abs() <= 1e-12);
    }

    #[test]
    fn spearman_is_invariant_under_monotone_maps(xs in prop::collection::vec(-100.0f64..100.0, 3..40)) {
        let ys: Vec<f64> = xs.iter().map(|x| x.powi(3) + 2.0).collect();
        let r = regression_metrics(&xs, &ys).unwrap().scc.unwrap();
        prop_assert!((r - 1.0).abs() < 1e-12);
    }
}

#[test]
fn single_class_predictions_have_zero_mcc() {
    let truth = [0, 1, 1, 0, 2];
    let pred = [1, 1, 1, 1, 1];
    let c = confusion_matrix(&pred, &truth, 3).unwrap();
    assert_eq!(mcc(&c), 0.0);
    assert_eq!(common::mcc_oracle(&pred, &truth, 3), 0.0);
}
