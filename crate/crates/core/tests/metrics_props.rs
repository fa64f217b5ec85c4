mod common;

use pirl::autodiff::Tensor;
use pirl::metrics::{self, MetricsReport, SplitLabel};
use proptest::prelude::*;
use rand::seq::SliceRandom;

/// Scores on a coarse grid (to exercise ties) with both classes present.
fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..80).prop_flat_map(|n| {
        (
            prop::collection::vec((-20i32..20).prop_map(|v| f64::from(v) / 10.0), n),
            prop::collection::vec(prop::bool::ANY.prop_map(f64::from), n - 2),
        )
            .prop_map(|(s, mut y)| {
                y.push(0.0);
                y.push(1.0);
                (s, y)
            })
    })
}

fn distinct_scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    scored_labels().prop_map(|(s, y)| {
        let s = s.iter().enumerate().map(|(i, v)| v + i as f64 * 1e-6).collect();
        (s, y)
    })
}

fn probs_labels() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..80).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0f64..=1.0, n),
            prop::collection::vec(prop::bool::ANY.prop_map(f64::from), n),
        )
    })
}

proptest! {
    #![proptest_config(common::proptest_config(128))]

    #[test]
    fn auroc_matches_pair_counting((s, y) in scored_labels()) {
        let fast = metrics::auroc(&s, &y).unwrap();
        prop_assert!((fast - common::brute_auroc(&s, &y)).abs() <= 1e-12);
    }

    #[test]
    fn auroc_is_invariant_to_increasing_maps((s, y) in scored_labels(), a in 0.01f64..10.0, b in -5.0f64..5.0) {
        let base = metrics::auroc(&s, &y).unwrap();
        let exp: Vec<f64> = s.iter().map(|v| v.exp()).collect();
        let affine: Vec<f64> = s.iter().map(|v| a * v + b).collect();
        prop_assert_eq!(metrics::auroc(&exp, &y).unwrap(), base);
        prop_assert_eq!(metrics::auroc(&affine, &y).unwrap(), base);
    }

    #[test]
    fn negated_scores_complement_auroc((s, y) in distinct_scored_labels()) {
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        let total = metrics::auroc(&s, &y).unwrap() + metrics::auroc(&neg, &y).unwrap();
        prop_assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn constant_scores_give_baselines((_, y) in scored_labels(), c in 0.0f64..1.0) {
        let s = vec![c; y.len()];
        let rate = y.iter().sum::<f64>() / y.len() as f64;
        prop_assert_eq!(metrics::auroc(&s, &y).unwrap(), 0.5);
        prop_assert!((metrics::auprc(&s, &y).unwrap() - rate).abs() <= 1e-12);
        prop_assert!((metrics::brier(&vec![rate; y.len()], &y).unwrap() - rate * (1.0 - rate)).abs() <= 1e-12);
    }

    #[test]
    fn metrics_are_bounded_and_pure((p, y) in probs_labels(), bins in 1usize..20) {
        let b = metrics::brier(&p, &y).unwrap();
        let e = metrics::ece(&p, &y, bins).unwrap();
        prop_assert!((0.0..=1.0).contains(&b) && (0.0..=1.0).contains(&e));
        prop_assert_eq!(b, metrics::brier(&p, &y).unwrap());
        prop_assert_eq!(e, metrics::ece(&p, &y, bins).unwrap());
        prop_assert_eq!(metrics::brier(&y, &y).unwrap(), 0.0);
        prop_assert_eq!(metrics::ece(&y, &y, bins).unwrap(), 0.0);
    }

    #[test]
    fn report_fields_are_valid((p, y) in probs_labels()) {
        prop_assume!(y.iter().any(|&v| v == 1.0) && y.iter().any(|&v| v == 0.0));
        let r = MetricsReport::evaluate(&p, &y, 10, SplitLabel::HeldOut).unwrap();
        prop_assert!(r.is_valid());
        prop_assert_eq!(r.n, p.len());
    }
}

#[test]
fn worked_examples() {
    assert_eq!(metrics::auroc(&[0.1, 0.4, 0.35, 0.8], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 0.75);
    assert!((metrics::auprc(&[0.9, 0.8, 0.7], &[1.0, 0.0, 1.0]).unwrap() - 5.0 / 6.0).abs() < 1e-12);
    assert!((metrics::brier(&[0.8, 0.4], &[1.0, 0.0]).unwrap() - 0.10).abs() < 1e-12);
    assert!((metrics::ece(&[0.2, 0.9], &[1.0, 1.0], 2).unwrap() - 0.45).abs() < 1e-12);
    assert!(metrics::auroc(&[0.1, 0.2], &[1.0, 1.0]).is_err());
    assert!(metrics::auprc(&[0.1, 0.2], &[0.0, 0.0]).is_err());
    assert!(metrics::brier(&[1.5], &[1.0]).is_err());
}

fn gaussian_clouds(seed: u64, n: usize, shift: f64) -> (Tensor, Vec<usize>) {
    let mut r = common::rng(seed);
    let x = common::normal_matrix(&mut r, n, 4);
    let env: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let mut data = x.into_data();
    for (i, &e) in env.iter().enumerate() {
        data[i * 4] += if e == 0 { shift } else { -shift };
    }
    (Tensor::matrix(n, 4, data).unwrap(), env)
}

/// True when the perceptron with bias finds a separating hyperplane within
/// the epoch budget.
fn perceptron_separates(x: &Tensor, env: &[usize], epochs: usize) -> bool {
    let p = x.cols();
    let mut w = vec![0.0; p + 1];
    for _ in 0..epochs {
        let mut mistakes = 0;
        for i in 0..x.rows() {
            let t = if env[i] == 0 { 1.0 } else { -1.0 };
            let z = (0..p).map(|j| w[j] * x.get(i, j)).sum::<f64>() + w[p];
            if t * z <= 0.0 {
                mistakes += 1;
                (0..p).for_each(|j| w[j] += t * x.get(i, j));
                w[p] += t;
            }
        }
        if mistakes == 0 {
            return true;
        }
    }
    false
}

#[test]
fn leakage_probe_agrees_with_perceptron_verdict() {
    for (shift, seed) in [(4.0, 1), (0.0, 2)] {
        let (x, env) = gaussian_clouds(seed, 400, shift);
        let separable = perceptron_separates(&x, &env, 500);
        let report = metrics::leakage_probe(&x, &env, 0.5, seed).unwrap();
        assert_eq!(separable, report.env_accuracy == 1.0, "shift {shift}: accuracy {}", report.env_accuracy);
    }
}

#[test]
fn shuffled_environment_labels_sit_within_binomial_bounds() {
    let k = 3;
    let n = 3000;
    let mut r = common::rng(9);
    let mut env: Vec<usize> = (0..n).map(|i| i % k).collect();
    let mut data = common::normal_matrix(&mut r, n, 6).into_data();
    for (i, &e) in env.iter().enumerate() {
        data[i * 6 + e] += 2.0;
    }
    let x = Tensor::matrix(n, 6, data).unwrap();
    assert!(metrics::leakage_probe(&x, &env, 0.5, 4).unwrap().env_accuracy > 0.8);

    env.shuffle(&mut r);
    let report = metrics::leakage_probe(&x, &env, 0.5, 4).unwrap();
    let chance = 1.0 / k as f64;
    let test_n = n as f64 * 0.5;
    let half_width = 1.96 * (chance * (1.0 - chance) / test_n).sqrt();
    assert_eq!(report.chance_level, chance);
    assert!(
        (report.env_accuracy - chance).abs() <= half_width,
        "accuracy {} outside {chance} ± {half_width}",
        report.env_accuracy
    );
}

#[test]
fn leakage_probe_needs_two_environments() {
    let mut r = common::rng(1);
    let x = common::normal_matrix(&mut r, 20, 2);
    assert!(metrics::leakage_probe(&x, &[0; 20], 0.5, 0).is_err());
}
