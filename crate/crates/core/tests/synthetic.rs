//! Correlated-label generator against empirical frequencies.

use dsin_core::data::synthetic::LabelModel;
use dsin_core::data::{generate_synthetic_dataset, CropSpec, SyntheticSpec};
use dsin_core::eval::au_correlation_matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ratios(labels: &[Vec<u8>]) -> Vec<f64> {
    let n = labels[0].len();
    (0..n)
        .map(|j| labels.iter().filter(|r| r[j] == 1).count() as f64 / labels.len() as f64)
        .collect()
}

#[test]
fn independent_pair_has_requested_ratios_and_no_correlation() {
    let corr = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let model = LabelModel::fit(&[0.3, 0.3], &corr).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let labels: Vec<Vec<u8>> = (0..2000).map(|_| model.sample(&mut rng, 100)).collect();
    for r in ratios(&labels) {
        assert!((0.25..=0.35).contains(&r), "ratio {r}");
    }
    let c = au_correlation_matrix(&labels).unwrap()[0][1];
    assert!(c.abs() <= 0.1, "correlation {c}");
}

#[test]
fn fair_coin_columns_are_uncorrelated() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let labels: Vec<Vec<u8>> = (0..2000).map(|_| (0..5).map(|_| rng.random_range(0..2u8)).collect()).collect();
    let c = au_correlation_matrix(&labels).unwrap();
    for (a, row) in c.iter().enumerate() {
        for (b, v) in row.iter().enumerate() {
            if a != b {
                assert!(v.abs() < 0.1, "columns {a},{b}: {v}");
            }
        }
    }
}

#[test]
fn generated_dataset_matches_requested_moments() {
    let mut spec = SyntheticSpec::independent(6, 0.3);
    spec.crop = CropSpec::five_point(32, 16);
    spec.subjects = 4;
    spec.samples_per_subject = 500;
    spec.seed = 12;
    for i in 0..6 {
        for j in i + 1..6 {
            spec.set_correlation(i, j, 0.3);
        }
    }
    for (i, j) in [(0, 1), (2, 3), (4, 5)] {
        spec.set_correlation(i, j, 0.7);
    }
    let dataset = generate_synthetic_dataset(&spec).unwrap();
    let labels = dataset.labels();
    assert_eq!(labels.len(), 2000);
    for (j, r) in ratios(&labels).iter().enumerate() {
        assert!((r - 0.3).abs() <= 0.05, "label {j}: ratio {r}");
    }
    let c = au_correlation_matrix(&labels).unwrap();
    for i in 0..6 {
        for j in 0..6 {
            let err = (c[i][j] - spec.correlations[i][j]).abs();
            assert!(err <= 0.1, "pair {i},{j}: {} vs {}", c[i][j], spec.correlations[i][j]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fitted_joint_reproduces_feasible_moments(
        p in proptest::collection::vec(0.2f64..0.6, 3),
        rho in proptest::collection::vec(-0.1f64..0.4, 3),
    ) {
        let mut corr = vec![vec![1.0; 3]; 3];
        for (k, (i, j)) in [(0, 1), (0, 2), (1, 2)].into_iter().enumerate() {
            corr[i][j] = rho[k];
            corr[j][i] = rho[k];
        }
        let model = LabelModel::fit(&p, &corr).unwrap();
        let (got_p, got_c) = model.exact_moments();
        for j in 0..3 {
            prop_assert!((got_p[j] - p[j]).abs() < 1e-3, "ratio {} vs {}", got_p[j], p[j]);
            for k in 0..3 {
                prop_assert!((got_c[j][k] - corr[j][k]).abs() < 1e-3, "corr {} vs {}", got_c[j][k], corr[j][k]);
            }
        }
    }
}
