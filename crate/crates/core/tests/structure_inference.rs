//! Structure inference against a naive per-edge scalar loop, the hand-worked
//! two-label trace, and range/identity invariants.

mod common;

use common::{hand_trace, max_diff, si_oracle_deviation, unit_weights};
use dsin_core::structure::{chi_regularizer, si_unroll, si_unroll_tape, SiOptions, SiuParams};
use dsin_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn unroll_matches_reference_loop() {
    let worst = si_oracle_deviation(12, 10, 100);
    assert!(worst < 1e-10, "largest deviation from the reference loop: {worst:e}");
}

#[test]
fn two_label_hand_trace() {
    let f = [0.8, 0.2];
    let (m, chi, y1) = hand_trace();
    for (got, want) in [(m[0], 0.8909), (m[1], 0.7110), (chi[0], 0.9169), (chi[1], 0.7687), (y1, 0.8188)] {
        assert!((got - want).abs() < 5e-4, "hand value {got} vs worked {want}");
    }
    let states = si_unroll(&f, &unit_weights(2), 1, SiOptions::default()).unwrap();
    let s = &states[1];
    assert!(max_diff(&s.messages, &m) < 1e-12);
    assert!(max_diff(s.chi.as_ref().unwrap(), &chi) < 1e-12);
    assert!((s.predictions[0] - y1).abs() < 1e-12);
}

#[test]
fn zero_iterations_return_the_fused_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = SiuParams::init(4, &mut rng, 1.0);
    let f = vec![0.1, 0.4, 0.6, 0.9];
    let states = si_unroll(&f, &params, 0, SiOptions::default()).unwrap();
    assert_eq!(states.len(), 1);
    assert_eq!(states[0].predictions, f);
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let fv = tape.constant(Tensor::from_rows(&[f.clone()]).unwrap());
    let (y, trace) = si_unroll_tape(&mut tape, &vars, fv, 0, SiOptions::default()).unwrap();
    assert!(trace.is_empty());
    assert_eq!(tape.value(y).values(), f.as_slice());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_quantity_stays_strictly_inside_the_unit_interval(
        seed in 0u64..10_000,
        n in 1usize..8,
        steps in 1usize..6,
        scale in 0.1f64..30.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = SiuParams::init(n, &mut rng, scale);
        let f: Vec<f64> = (0..n).map(|_| rng.random_range(1e-6..1.0 - 1e-6)).collect();
        for s in si_unroll(&f, &params, steps, SiOptions::default()).unwrap().iter().skip(1) {
            for v in s.messages.iter().chain(s.chi.as_ref().unwrap()).chain(&s.predictions) {
                prop_assert!(*v > 0.0 && *v < 1.0, "value {} escapes (0, 1)", v);
            }
        }
    }

    #[test]
    fn chi_penalty_is_linear_in_r_and_in_chi(seed in 0u64..10_000, r in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = SiuParams::init(5, &mut rng, 1.0);
        let f: Vec<f64> = (0..5).map(|_| rng.random_range(0.05..0.95)).collect();
        let states = si_unroll(&f, &params, 4, SiOptions::default()).unwrap();
        let base = chi_regularizer(&states, r).unwrap();
        prop_assert!((chi_regularizer(&states, 2.0 * r).unwrap() - 2.0 * base).abs() < 1e-12);
        let halved: Vec<_> = states
            .iter()
            .cloned()
            .map(|mut s| {
                s.chi = s.chi.map(|c| c.iter().map(|x| x / 2.0).collect());
                s
            })
            .collect();
        prop_assert!((chi_regularizer(&halved, r).unwrap() - base / 2.0).abs() < 1e-12);
        let mean: f64 = states.iter().skip(1).flat_map(|s| s.chi.clone().unwrap()).sum::<f64>() / 20.0;
        prop_assert!((base - r * mean).abs() < 1e-12);
    }
}
