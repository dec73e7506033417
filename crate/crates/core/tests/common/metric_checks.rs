//! Metric checks against brute-force recounts, panicking on the first mismatch.

use dsin_core::eval::{default_grid, f1_frame, label_stats, tune_thresholds};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{brute_f1, metric_instance};

pub fn f1_frame_matches_brute_force_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..1000 {
        let (scores, labels, tau) = metric_instance(&mut rng);
        let report = f1_frame(&scores, &labels, &tau).unwrap();
        let mut sum = 0.0;
        for (j, c) in report.classes.iter().enumerate() {
            let (tp, fp, fn_, tn, f1) = brute_f1(&scores, &labels, j, tau[j]);
            assert_eq!((c.tp, c.fp, c.fn_, c.tn), (tp, fp, fn_, tn));
            assert_eq!(c.f1, f1, "class {j}");
            sum += f1;
        }
        assert!((report.macro_f1 - sum / tau.len() as f64).abs() < 1e-12);
    }
}

pub fn tuned_thresholds_are_grid_optimal_and_never_worse_than_half() {
    let grid = default_grid();
    assert!(grid.contains(&0.5));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..500 {
        let (scores, labels, _) = metric_instance(&mut rng);
        let n = labels[0].len();
        let tuned = tune_thresholds(&scores, &labels, &grid).unwrap();
        let at_half = f1_frame(&scores, &labels, &vec![0.5; n]).unwrap();
        let at_tuned = f1_frame(&scores, &labels, &tuned).unwrap();
        for j in 0..n {
            let all: Vec<f64> = grid.iter().map(|&t| brute_f1(&scores, &labels, j, t).4).collect();
            let best = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let first = grid[all.iter().position(|&f| f == best).unwrap()];
            assert_eq!(tuned[j], first, "class {j}: smallest maximizer");
            assert!(at_tuned.classes[j].f1 >= at_half.classes[j].f1);
        }
    }
}

pub fn label_statistics_on_hand_built_sets() {
    // three samples over four labels with 2, 0 and 3 active labels
    let labels = vec![vec![1, 1, 0, 0], vec![0, 0, 0, 0], vec![1, 0, 1, 1]];
    let s = label_stats(&labels).unwrap();
    assert!((s.cardinality - 5.0 / 3.0).abs() < 1e-12);
    assert!((s.density - 5.0 / 12.0).abs() < 1e-12);
    let s = label_stats(&[vec![1, 1], vec![1, 1]]).unwrap();
    assert_eq!((s.cardinality, s.density), (2.0, 1.0));
    let s = label_stats(&[vec![0, 0, 0]]).unwrap();
    assert_eq!((s.cardinality, s.density), (0.0, 0.0));
    assert!(label_stats(&[]).is_err());
    assert!(label_stats(&[vec![1, 0], vec![1]]).is_err());
}
