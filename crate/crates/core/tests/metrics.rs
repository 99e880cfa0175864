mod common;

use cdhar::evaluation::{macro_f1, population_std, MetricsReport, RunRecord};
use cdhar::ConfusionMatrix;
use common::macro_f1_oracle;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn macro_f1_matches_the_per_class_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..1000 {
        let k = rng.random_range(2..=8);
        let sparse = trial % 3 == 0;
        let rows: Vec<Vec<u64>> = (0..k)
            .map(|_| {
                (0..k)
                    .map(|_| if sparse && rng.random_bool(0.6) { 0 } else { rng.random_range(0..50) })
                    .collect()
            })
            .collect();
        if rows.iter().flatten().all(|&v| v == 0) {
            continue;
        }
        let cm = ConfusionMatrix::from_rows(&rows).unwrap();
        let got = macro_f1(&cm).unwrap();
        let want = macro_f1_oracle(&rows);
        assert!((got - want).abs() < 1e-9, "trial {trial}: {got} vs {want}");
    }
}

#[test]
fn perfect_predictions_score_one() {
    for k in 1..=8 {
        let truth: Vec<usize> = (0..10 * k).map(|i| i % k).collect();
        let cm = ConfusionMatrix::from_predictions(&truth, &truth, k).unwrap();
        assert_eq!(macro_f1(&cm).unwrap(), 1.0);
    }
}

#[test]
fn absent_classes_count_as_zero() {
    let truth = vec![0; 12];
    let cm = ConfusionMatrix::from_predictions(&truth, &truth, 3).unwrap();
    assert!((macro_f1(&cm).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert!(macro_f1(&ConfusionMatrix::new(3)).is_err());
    assert!(ConfusionMatrix::from_predictions(&[0, 1], &[0], 2).is_err());
    assert!(ConfusionMatrix::from_predictions(&[0, 3], &[0, 1], 2).is_err());
}

#[test]
fn report_summary_matches_hand_computation() {
    let mut runs = Vec::new();
    for seed in [0u64, 1] {
        for fold in [0usize, 1] {
            for n in [2usize, 10] {
                runs.push(RunRecord {
                    seed,
                    fold,
                    n_per_class: n,
                    f1: 0.1 * (seed as f64 + 1.0) + 0.01 * fold as f64 + n as f64 / 100.0,
                });
            }
        }
    }
    let report = MetricsReport::from_runs("m", "t", "h", &[0, 1], &[0, 1], &[2, 10], runs.clone()).unwrap();
    assert!(report.is_complete());
    let at2 = report.at(2).unwrap();
    // Seed means: 0.1 + 0.005 + 0.02 and 0.2 + 0.005 + 0.02.
    let means = [0.125, 0.225];
    assert!((at2.mean_f1 - 0.175).abs() < 1e-12);
    let std = ((means[0] - 0.175f64).powi(2) + (means[1] - 0.175f64).powi(2)) / 2.0;
    assert!((at2.std_f1 - std.sqrt()).abs() < 1e-12);
    assert!((population_std(&means) - 0.05).abs() < 1e-12);

    let mut short = runs.clone();
    short.pop();
    assert!(MetricsReport::from_runs("m", "t", "h", &[0, 1], &[0, 1], &[2, 10], short).is_err());
    let mut dup = runs;
    dup.push(dup[0]);
    assert!(MetricsReport::from_runs("m", "t", "h", &[0, 1], &[0, 1], &[2, 10], dup).is_err());
}

proptest! {
    #[test]
    fn macro_f1_is_invariant_to_relabeling(
        cells in prop::collection::vec(0u64..30, 16),
        perm in Just((0..4).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        prop_assume!(cells.iter().any(|&c| c > 0));
        let rows: Vec<Vec<u64>> = cells.chunks(4).map(|c| c.to_vec()).collect();
        let relabeled: Vec<Vec<u64>> = (0..4).map(|i| (0..4).map(|j| rows[perm[i]][perm[j]]).collect()).collect();
        let a = macro_f1(&ConfusionMatrix::from_rows(&rows).unwrap()).unwrap();
        let b = macro_f1(&ConfusionMatrix::from_rows(&relabeled).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }
}
