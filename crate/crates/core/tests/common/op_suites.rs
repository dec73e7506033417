//! Per-op gradient suites, each panicking on the first op whose analytic
//! gradient disagrees with central differences.

use dsin_core::data::ClassStats;
use dsin_core::fusion::bce_loss;
use dsin_core::patch::{label_tensor, weighted_l2_loss};
use dsin_core::structure::{chi_regularizer_tape, si_unroll_tape, SiOptions, SiuParams};
use dsin_core::tensor::{BatchNormMode, BatchNormState, Padding};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{away_from_zero, check_op, random_tensor};

pub const ALL: [(&str, fn()); 6] = [
    ("elementwise", elementwise_ops),
    ("binary", binary_ops_with_broadcasting),
    ("shape", shape_and_reduction_ops),
    ("affine_conv", affine_and_convolution),
    ("batch_norm", batch_norm_in_training_mode),
    ("loss_si", losses_and_structure_inference),
];

pub fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = away_from_zero(&mut rng, &[3, 4]);
    check_op("relu", vec![x.clone()], |t, v| Ok(t.relu(v[0])));
    check_op("sigmoid", vec![x.clone()], |t, v| Ok(t.sigmoid(v[0])));
    check_op("scale", vec![x.clone()], |t, v| Ok(t.scale(v[0], -1.7)));
    check_op("add_scalar", vec![x.clone()], |t, v| Ok(t.add_scalar(v[0], 0.3)));
    // bounds at ±0.05 sit strictly inside the zero-free gap
    check_op("clamp", vec![x.clone()], |t, v| Ok(t.clamp(v[0], -0.05, 0.05)));
    check_op("clamp_wide", vec![x.clone()], |t, v| Ok(t.clamp(v[0], -0.5, 0.5)));
    let pos = random_tensor(&mut rng, &[3, 4], 0.2, 2.0);
    check_op("ln", vec![pos], |t, v| t.ln(v[0]));
}

pub fn binary_ops_with_broadcasting() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let row = random_tensor(&mut rng, &[4], -1.0, 1.0);
    let col = random_tensor(&mut rng, &[2, 3, 1], -1.0, 1.0);
    check_op("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    check_op("sub", vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
    check_op("mul", vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    check_op("mul_row", vec![a.clone(), row.clone()], |t, v| t.mul(v[0], v[1]));
    check_op("add_row", vec![row, a.clone()], |t, v| t.add(v[0], v[1]));
    check_op("sub_col", vec![a.clone(), col.clone()], |t, v| t.sub(v[0], v[1]));
    check_op("mul_outer", vec![col, random_tensor(&mut rng, &[1, 1, 4], -1.0, 1.0)], |t, v| t.mul(v[0], v[1]));
    check_op("self_mul", vec![a], |t, v| t.mul(v[0], v[0]));
}

pub fn shape_and_reduction_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    for axis in 0..3 {
        check_op(&format!("mean{axis}"), vec![x.clone()], move |t, v| t.mean(v[0], axis));
        check_op(&format!("select{axis}"), vec![x.clone()], move |t, v| t.select(v[0], axis, 1));
    }
    check_op("mean_all", vec![x.clone()], |t, v| t.mean_all(v[0]));
    check_op("reshape", vec![x.clone()], |t, v| t.reshape(v[0], [4, 6]));
    let y = random_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    for axis in 0..4 {
        check_op(&format!("stack{axis}"), vec![x.clone(), y.clone()], move |t, v| t.stack(&[v[0], v[1], v[0]], axis));
    }
}

pub fn affine_and_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tensor(&mut rng, &[3, 5], -1.0, 1.0);
    let w = random_tensor(&mut rng, &[5, 2], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[2], -1.0, 1.0);
    check_op("affine", vec![x, w, b], |t, v| t.affine(v[0], v[1], v[2]));
    let img = random_tensor(&mut rng, &[2, 5, 5, 2], -1.0, 1.0);
    let filters = random_tensor(&mut rng, &[3, 3, 2, 3], -1.0, 1.0);
    for (stride, padding) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid), (2, Padding::Valid)] {
        check_op(
            &format!("conv2d_{stride}_{padding:?}"),
            vec![img.clone(), filters.clone()],
            move |t, v| t.conv2d(v[0], v[1], stride, padding),
        );
    }
}

pub fn batch_norm_in_training_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&mut rng, &[4, 3, 3, 2], -1.0, 1.0);
    let gamma = random_tensor(&mut rng, &[2], 0.5, 1.5);
    let beta = random_tensor(&mut rng, &[2], -0.5, 0.5);
    check_op("batch_norm", vec![x.clone(), gamma.clone(), beta.clone()], |t, v| {
        let mut state = BatchNormState::new(2);
        t.batch_norm(v[0], v[1], v[2], &mut state, BatchNormMode::Train)
    });
    // inference mode normalizes with fixed statistics, an affine map of the input
    let seeded = BatchNormState::from_parts(vec![0.1, -0.2], vec![0.5, 2.0], true).unwrap();
    check_op("batch_norm_infer", vec![x, gamma, beta], move |t, v| {
        let mut state = seeded.clone();
        t.batch_norm(v[0], v[1], v[2], &mut state, BatchNormMode::Infer)
    });
}

pub fn losses_and_structure_inference() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rows: Vec<Vec<u8>> = (0..4).map(|_| (0..3).map(|_| rng.random_range(0..2u8)).collect()).collect();
    let refs: Vec<&[u8]> = rows.iter().map(|r| r.as_slice()).collect();
    let labels = label_tensor(&refs).unwrap();
    let probs = random_tensor(&mut rng, &[4, 3], 0.05, 0.95);
    let l = labels.clone();
    check_op("bce", vec![probs.clone()], move |t, v| bce_loss(t, v[0], &l));
    let stats = ClassStats {
        positive_ratio: vec![0.25, 0.5, 0.75],
        pos_weight: vec![3.0, 1.0, 1.0 / 3.0],
    };
    let l = labels.clone();
    check_op("weighted_l2", vec![probs.clone()], move |t, v| weighted_l2_loss(t, v[0], &l, &stats));

    for (ncf, include_self) in [(true, true), (false, true), (true, false)] {
        let opts = SiOptions { correction_factors: ncf, include_self };
        let p = SiuParams::init(3, &mut rng, 1.0);
        let inputs = vec![
            probs.clone(),
            p.msg_w.clone(),
            p.msg_b.clone(),
            p.gate_w.clone(),
            p.gate_b.clone(),
            p.pred_w.clone(),
            p.pred_b.clone(),
        ];
        check_op(&format!("si_unroll_{ncf}_{include_self}"), inputs, move |t, v| {
            let vars = dsin_core::structure::SiuVars {
                msg_w: v[1],
                msg_b: v[2],
                gate_w: v[3],
                gate_b: v[4],
                pred_w: v[5],
                pred_b: v[6],
            };
            let (y, trace) = si_unroll_tape(t, &vars, v[0], 3, opts)?;
            let reg = chi_regularizer_tape(t, &trace, 0.3)?;
            t.add(y, reg)
        });
    }
}
