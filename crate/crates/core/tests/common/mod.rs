//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod metric_checks;
pub mod op_suites;

use dsin_core::data::{ClassStats, PatchGeometry};
use dsin_core::model::{ModelConfig, ModelParams, Trainable};
use dsin_core::patch::{label_tensor, TopologyWidths};
use dsin_core::structure::{SiOptions, SiuParams};
use dsin_core::tensor::{grad_check, BatchNormMode};
use dsin_core::train::{compound_loss_tape, head_losses, LossWeights};
use dsin_core::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn sigma(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, so kinks at 0 stay out of the probe range.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Largest relative gradient error of `build` (inputs to an arbitrary-shaped
/// output), after contracting the output with fixed random weights.
pub fn op_grad_error(name: &str, inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let point: Vec<f64> = inputs.iter().flat_map(|t| t.values().to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64);
    let mut weights: Option<Tensor> = None;
    let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let mut offset = 0;
        let vars: Vec<Var> = shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let t = Tensor::new(s.clone(), x[offset..offset + n].to_vec()).unwrap();
                offset += n;
                tape.variable(t)
            })
            .collect();
        let out = build(&mut tape, &vars)?;
        let shape = tape.value(out).shape().to_vec();
        let w = weights.get_or_insert_with(|| random_tensor(&mut rng, &shape, -1.0, 1.0)).clone();
        let w = tape.constant(w);
        let prod = tape.mul(out, w)?;
        let loss = tape.mean_all(prod)?;
        let value = tape.value(loss).values()[0];
        let grads = tape.backward(loss)?;
        let mut g = Vec::with_capacity(x.len());
        for (v, s) in vars.iter().zip(&shapes) {
            let n: usize = s.iter().product();
            g.extend_from_slice(grads.get(*v).unwrap_or(&vec![0.0; n]));
        }
        Ok((value, g))
    };
    grad_check(f, &point, GRAD_EPS).unwrap().max_rel_error
}

pub fn check_op(name: &str, inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let err = op_grad_error(name, inputs, build);
    assert!(err < GRAD_TOL, "{name}: max relative error {err:.3e}");
}

/// Toy model: 4 labels, 2 streams of 16×16×1, 3 structure iterations, every block trainable.
pub fn toy_model() -> ModelParams {
    let mut config = ModelConfig::new(4, vec![PatchGeometry::square(16, 1); 2]);
    config.widths = TopologyWidths {
        conv: vec![2, 2],
        lead: vec![],
        fc_hidden: 3,
        kernel: 3,
        local_side: 16,
    };
    config.fusion_hidden = 3;
    config.iterations = 3;
    let mut model = ModelParams::init(config, 7).unwrap();
    model.set_trainable(Trainable {
        conv: true,
        patch_fc: true,
        fusion: true,
        structure: true,
    });
    model
}

/// Largest relative gradient error of the full compound loss of the toy model
/// on a 4-sample batch, at the parameter point drawn from `seed`.
pub fn compound_loss_grad_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = toy_model();
    let shapes: Vec<Vec<usize>> = template.named_params().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    // away from the near-zero init so every path carries a sizeable gradient
    let point: Vec<f64> = (0..total).map(|_| rng.random_range(-0.6..0.6)).collect();
    let inputs: Vec<Tensor> = (0..2).map(|_| random_tensor(&mut rng, &[4, 16, 16, 1], 0.0, 1.0)).collect();
    let rows: Vec<&[u8]> = vec![&[1, 0, 1, 0], &[0, 1, 1, 0], &[1, 1, 0, 1], &[0, 0, 0, 1]];
    let labels = label_tensor(&rows).unwrap();
    let stats = ClassStats {
        positive_ratio: vec![0.5; 4],
        pos_weight: vec![1.5, 0.8, 1.0, 2.0],
    };
    let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut model = template.clone();
        let mut offset = 0;
        for t in model.params_mut() {
            let n = t.len();
            t.values_mut().copy_from_slice(&x[offset..offset + n]);
            offset += n;
        }
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let xs: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let heads = model.forward(&mut tape, &vars, &xs, BatchNormMode::Train)?;
        let hl = head_losses(&mut tape, &heads, &labels, &stats, 0.05)?;
        let loss = compound_loss_tape(&mut tape, &hl, LossWeights::default())?;
        let value = tape.value(loss).values()[0];
        let grads = tape.backward(loss)?;
        let mut g = Vec::with_capacity(x.len());
        for (v, s) in vars.all().into_iter().zip(&shapes) {
            let n: usize = s.iter().product();
            g.extend_from_slice(grads.get(v).unwrap_or(&vec![0.0; n]));
        }
        Ok((value, g))
    };
    let report = grad_check(f, &point, GRAD_EPS).unwrap();
    assert_eq!(report.analytic.len(), total);
    report.max_rel_error
}

/// Plain weight arrays for the reference loop.
pub struct Weights {
    msg: Vec<[f64; 4]>,
    gate: Vec<[f64; 4]>,
    pred: Vec<[f64; 3]>,
}

impl Weights {
    pub fn of(p: &SiuParams) -> Self {
        let n = p.num_labels();
        let (mw, mb) = (p.msg_w.values(), p.msg_b.values());
        let (gw, gb) = (p.gate_w.values(), p.gate_b.values());
        let (pw, pb) = (p.pred_w.values(), p.pred_b.values());
        Self {
            msg: (0..n).map(|j| [mw[3 * j], mw[3 * j + 1], mw[3 * j + 2], mb[j]]).collect(),
            gate: (0..n).map(|j| [gw[3 * j], gw[3 * j + 1], gw[3 * j + 2], gb[j]]).collect(),
            pred: (0..n).map(|j| [pw[2 * j], pw[2 * j + 1], pb[j]]).collect(),
        }
    }
}

/// One iteration of the reference loop: messages, correction factors, predictions.
pub type RefStep = (Vec<f64>, Vec<f64>, Vec<f64>);

/// Reference unroll: one scalar per edge, explicit sums, no shared helpers.
pub fn reference_unroll(f: &[f64], w: &Weights, steps: usize, opts: SiOptions) -> Vec<RefStep> {
    let n = f.len();
    let mean_for = |v: &[f64], j: usize| {
        let mut s = 0.0;
        let mut c = 0.0;
        for (i, x) in v.iter().enumerate() {
            if opts.include_self || i != j {
                s += x;
                c += 1.0;
            }
        }
        s / c
    };
    let mut m = f.to_vec();
    let mut y = f.to_vec();
    let mut out = Vec::new();
    for _ in 0..steps {
        let mut m_new = vec![0.0; n];
        for j in 0..n {
            let a = w.msg[j];
            m_new[j] = sigma(a[0] * mean_for(&m, j) + a[1] * f[j] + a[2] * y[j] + a[3]);
        }
        let mut chi = vec![0.0; n];
        for j in 0..n {
            let g = w.gate[j];
            chi[j] = sigma(g[0] * mean_for(&m_new, j) + g[1] * f[j] + g[2] * y[j] + g[3]);
        }
        let mut edge = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                edge[i][j] = if opts.correction_factors { (chi[i] + chi[j]) / 2.0 * m_new[i] } else { m_new[i] };
            }
        }
        let mut y_new = vec![0.0; n];
        for j in 0..n {
            let mut s = 0.0;
            let mut c = 0.0;
            for (i, row) in edge.iter().enumerate() {
                if opts.include_self || i != j {
                    s += row[j];
                    c += 1.0;
                }
            }
            let p = w.pred[j];
            y_new[j] = sigma(p[0] * (s / c) + p[1] * f[j] + p[2]);
        }
        out.push((m_new.clone(), chi, y_new.clone()));
        m = m_new;
        y = y_new;
    }
    out
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub const ALL_SI_OPTIONS: [SiOptions; 3] = [
    SiOptions { correction_factors: true, include_self: true },
    SiOptions { correction_factors: false, include_self: true },
    SiOptions { correction_factors: true, include_self: false },
];

/// Largest deviation between the library's unrolls (tape and scalar paths)
/// and the reference loop over `seeds` random parameter/input draws.
pub fn si_oracle_deviation(n: usize, steps: usize, seeds: u64) -> f64 {
    use dsin_core::structure::{si_unroll, si_unroll_tape};
    let batch = 3;
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = SiuParams::init(n, &mut rng, 2.0);
        let w = Weights::of(&params);
        let opts = ALL_SI_OPTIONS[seed as usize % ALL_SI_OPTIONS.len()];
        let rows: Vec<Vec<f64>> = (0..batch).map(|_| (0..n).map(|_| rng.random_range(0.01..0.99)).collect()).collect();

        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let f = tape.constant(Tensor::from_rows(&rows).unwrap());
        let (y, trace) = si_unroll_tape(&mut tape, &vars, f, steps, opts).unwrap();
        assert_eq!(trace.len(), steps);
        let batched = tape.value(y).values().to_vec();

        for (b, row) in rows.iter().enumerate() {
            let expect = reference_unroll(row, &w, steps, opts);
            let states = si_unroll(row, &params, steps, opts).unwrap();
            for (t, (m, chi, yh)) in expect.iter().enumerate() {
                let s = &states[t + 1];
                worst = worst
                    .max(max_diff(&s.messages, m))
                    .max(max_diff(s.chi.as_ref().unwrap(), chi))
                    .max(max_diff(&s.predictions, yh));
                let row_of = |v: Var| tape.value(v).values()[b * n..(b + 1) * n].to_vec();
                worst = worst
                    .max(max_diff(&row_of(trace[t].messages), m))
                    .max(max_diff(&row_of(trace[t].chi), chi))
                    .max(max_diff(&row_of(trace[t].predictions), yh));
            }
            worst = worst.max(max_diff(&batched[b * n..(b + 1) * n], &expect[steps - 1].2));
        }
    }
    worst
}

/// The two-label, one-iteration trace with every weight 1 and every bias 0,
/// computed by hand: `(m, chi, y1)`.
pub fn hand_trace() -> ([f64; 2], [f64; 2], f64) {
    // mean of f = (0.8, 0.2) is 0.5, so m1 = σ(0.5 + 0.8 + 0.8), m2 = σ(0.5 + 0.2 + 0.2)
    let m = [sigma(2.1), sigma(0.9)];
    let mu = (m[0] + m[1]) / 2.0;
    let chi = [sigma(mu + 1.6), sigma(mu + 0.4)];
    let incoming = (chi[0] * m[0] + (chi[1] + chi[0]) / 2.0 * m[1]) / 2.0;
    (m, chi, sigma(incoming + 0.8))
}

pub fn unit_weights(n: usize) -> SiuParams {
    let mut p = SiuParams::zeros(n);
    for t in [&mut p.msg_w, &mut p.gate_w, &mut p.pred_w] {
        t.values_mut().fill(1.0);
    }
    p
}

/// Scores on a coarse lattice so that ties with thresholds actually happen.
pub fn metric_instance(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<Vec<u8>>, Vec<f64>) {
    let m = rng.random_range(1..40);
    let n = rng.random_range(1..6);
    let scores = (0..m).map(|_| (0..n).map(|_| rng.random_range(0..=20) as f64 / 20.0).collect()).collect();
    let labels = (0..m).map(|_| (0..n).map(|_| rng.random_range(0..2u8)).collect()).collect();
    let tau = (0..n).map(|_| rng.random_range(1..20) as f64 / 20.0).collect();
    (scores, labels, tau)
}

/// Confusion counts and F1 from a fresh recount, with F1 as 2TP / (2TP + FP + FN).
pub fn brute_f1(scores: &[Vec<f64>], labels: &[Vec<u8>], j: usize, tau: f64) -> (usize, usize, usize, usize, f64) {
    let tp = scores.iter().zip(labels).filter(|(s, y)| s[j] >= tau && y[j] == 1).count();
    let fp = scores.iter().zip(labels).filter(|(s, y)| s[j] >= tau && y[j] == 0).count();
    let fn_ = scores.iter().zip(labels).filter(|(s, y)| s[j] < tau && y[j] == 1).count();
    let tn = scores.len() - tp - fp - fn_;
    let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
    (tp, fp, fn_, tn, f1)
}
