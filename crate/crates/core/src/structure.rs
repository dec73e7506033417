//! Recurrent structure inference: one unit per label exchanging gated messages.
//!
//! Each iteration computes a message per node from the mean of the previous
//! messages, the fused prediction and the previous output; a correction factor
//! per node from the new mean; gates every ordered pair by the average of the
//! two nodes' factors; and re-predicts each node from the mean of its incoming
//! gated messages. Parameters are shared across iterations.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::tape::sigmoid;
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_ITERATIONS: usize = 10;
pub const DEFAULT_CHI_PENALTY: f64 = 5e-3;

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SiOptions {
    /// When off, gated messages are the raw sender messages.
    pub correction_factors: bool,
    /// When off, every node-mean skips the node's own contribution.
    pub include_self: bool,
}

impl Default for SiOptions {
    fn default() -> Self {
        Self {
            correction_factors: true,
            include_self: true,
        }
    }
}

impl SiOptions {
    fn check(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::dim("structure_inference", "no labels"));
        }
        if !self.include_self && n == 1 {
            return Err(Error::Config("excluding self-messages needs at least two labels".into()));
        }
        Ok(())
    }
}

/// Shared per-label parameters: message unit (3 weights), gate unit (3) and
/// prediction unit (2), each with a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct SiuParams {
    pub msg_w: Tensor,
    pub msg_b: Tensor,
    pub gate_w: Tensor,
    pub gate_b: Tensor,
    pub pred_w: Tensor,
    pub pred_b: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct SiuVars {
    pub msg_w: Var,
    pub msg_b: Var,
    pub gate_w: Var,
    pub gate_b: Var,
    pub pred_w: Var,
    pub pred_b: Var,
}

impl SiuVars {
    pub fn all(&self) -> [Var; 6] {
        [self.msg_w, self.msg_b, self.gate_w, self.gate_b, self.pred_w, self.pred_b]
    }
}

const NAMES: [&str; 6] = ["msg_w", "msg_b", "gate_w", "gate_b", "pred_w", "pred_b"];

impl SiuParams {
    fn build(n: usize, mut make: impl FnMut(&[usize]) -> Tensor) -> Self {
        Self {
            msg_w: make(&[n, 3]),
            msg_b: make(&[n]),
            gate_w: make(&[n, 3]),
            gate_b: make(&[n]),
            pred_w: make(&[n, 2]),
            pred_b: make(&[n]),
        }
    }

    pub fn init<R: Rng>(n: usize, rng: &mut R, scale: f64) -> Self {
        Self::build(n, |s| {
            let len = s.iter().product();
            Tensor::new(s.to_vec(), (0..len).map(|_| rng.random_range(-scale..=scale)).collect())
                .expect("shape")
        })
    }

    pub fn zeros(n: usize) -> Self {
        Self::build(n, |s| Tensor::zeros(s.to_vec()))
    }

    pub fn num_labels(&self) -> usize {
        self.msg_b.len()
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [&self.msg_w, &self.msg_b, &self.gate_w, &self.gate_b, &self.pred_w, &self.pred_b]
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        NAMES.iter().map(|n| n.to_string()).zip(self.tensors()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.msg_w,
            &mut self.msg_b,
            &mut self.gate_w,
            &mut self.gate_b,
            &mut self.pred_w,
            &mut self.pred_b,
        ]
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.params_mut().into_iter().for_each(|t| t.set_requires_grad(on));
    }

    pub fn bind(&self, tape: &mut Tape) -> SiuVars {
        let [msg_w, msg_b, gate_w, gate_b, pred_w, pred_b] = self.tensors().map(|t| tape.param(t));
        SiuVars {
            msg_w,
            msg_b,
            gate_w,
            gate_b,
            pred_w,
            pred_b,
        }
    }

    fn row(&self, t: &Tensor, j: usize) -> Vec<f64> {
        let k = t.shape()[1];
        t.values()[j * k..(j + 1) * k].to_vec()
    }
}

/// Recorded outputs of one iteration, each `[B×N]`.
#[derive(Debug, Clone, Copy)]
pub struct SiStepVars {
    pub messages: Var,
    pub chi: Var,
    pub predictions: Var,
}

/// `Σ_k inputs[k] · w[:,k] + b`, then sigmoid. Inputs broadcast against `[N]`.
fn unit(tape: &mut Tape, w: Var, b: Var, inputs: &[Var]) -> Result<Var> {
    let mut acc = b;
    for (k, &x) in inputs.iter().enumerate() {
        let col = tape.select(w, 1, k)?;
        let term = tape.mul(x, col)?;
        acc = tape.add(acc, term)?;
    }
    Ok(tape.sigmoid(acc))
}

/// Per-node mean of `x[B×N]` over all nodes, or over the other nodes.
fn node_mean(tape: &mut Tape, x: Var, include_self: bool) -> Result<Var> {
    let [b, n] = dims2(tape, x)?;
    let mean = tape.mean(x, 1)?;
    let mean = tape.reshape(mean, [b, 1])?;
    if include_self {
        return Ok(mean);
    }
    let total = tape.scale(mean, n as f64);
    let others = tape.sub(total, x)?;
    Ok(tape.scale(others, 1.0 / (n as f64 - 1.0)))
}

fn dims2(tape: &Tape, x: Var) -> Result<[usize; 2]> {
    match *tape.value(x).shape() {
        [b, n] => Ok([b, n]),
        ref s => Err(Error::dim("structure_inference", format!("expected [B×N], got {s:?}"))),
    }
}

/// Mean over senders of the gated messages, per recipient: `[B×N]`.
fn incoming_mean(tape: &mut Tape, m: Var, chi: Var, opts: SiOptions) -> Result<Var> {
    let [b, n] = dims2(tape, m)?;
    let senders = tape.reshape(m, [b, n, 1])?;
    let gated = if opts.correction_factors {
        let chi_s = tape.reshape(chi, [b, n, 1])?;
        let chi_r = tape.reshape(chi, [b, 1, n])?;
        let sum = tape.add(chi_s, chi_r)?;
        let gate = tape.scale(sum, 0.5);
        tape.mul(gate, senders)?
    } else {
        let ones = tape.constant(Tensor::full([1, n, n], 1.0));
        tape.mul(ones, senders)?
    };
    if opts.include_self {
        return tape.mean(gated, 1);
    }
    let mask: Vec<f64> = (0..n * n).map(|k| if k / n == k % n { 0.0 } else { 1.0 }).collect();
    let mask = tape.constant(Tensor::new([n, n], mask)?);
    let off = tape.mul(gated, mask)?;
    let mean = tape.mean(off, 1)?;
    Ok(tape.scale(mean, n as f64 / (n as f64 - 1.0)))
}

/// Unrolls `steps` iterations from fused predictions `f[B×N]`.
///
/// Returns the final predictions (`f` itself when `steps == 0`) and every step.
pub fn si_unroll_tape(
    tape: &mut Tape,
    vars: &SiuVars,
    f: Var,
    steps: usize,
    opts: SiOptions,
) -> Result<(Var, Vec<SiStepVars>)> {
    let [_, n] = dims2(tape, f)?;
    opts.check(n)?;
    let expected = tape.value(vars.msg_b).len();
    if n != expected {
        return Err(Error::dim(
            "si_unroll",
            format!("{n} fused predictions for {expected} structure units"),
        ));
    }
    let (mut m, mut y) = (f, f);
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let prev_mean = node_mean(tape, m, opts.include_self)?;
        let m_new = unit(tape, vars.msg_w, vars.msg_b, &[prev_mean, f, y])?;
        let new_mean = node_mean(tape, m_new, opts.include_self)?;
        let chi = unit(tape, vars.gate_w, vars.gate_b, &[new_mean, f, y])?;
        let incoming = incoming_mean(tape, m_new, chi, opts)?;
        let y_new = unit(tape, vars.pred_w, vars.pred_b, &[incoming, f])?;
        trace.push(SiStepVars {
            messages: m_new,
            chi,
            predictions: y_new,
        });
        m = m_new;
        y = y_new;
    }
    Ok((y, trace))
}

/// `r` times the mean correction factor over the whole unroll.
pub fn chi_regularizer_tape(tape: &mut Tape, trace: &[SiStepVars], r: f64) -> Result<Var> {
    if !(r >= 0.0) {
        return Err(Error::domain("chi_regularizer", format!("penalty weight {r} must be ≥ 0")));
    }
    if trace.is_empty() || r == 0.0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let chis: Vec<Var> = trace.iter().map(|s| s.chi).collect();
    let all = tape.stack(&chis, 0)?;
    let mean = tape.mean_all(all)?;
    Ok(tape.scale(mean, r))
}

// ---- single-sample value API ------------------------------------------------

/// Node values of one sample at iteration `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SiState {
    pub t: usize,
    pub messages: Vec<f64>,
    /// Unset at `t = 0`.
    pub chi: Option<Vec<f64>>,
    pub predictions: Vec<f64>,
    pub fused: Vec<f64>,
}

pub fn si_init(f: &[f64]) -> SiState {
    SiState {
        t: 0,
        messages: f.to_vec(),
        chi: None,
        predictions: f.to_vec(),
        fused: f.to_vec(),
    }
}

fn dot(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

fn means(x: &[f64], include_self: bool) -> Vec<f64> {
    let n = x.len() as f64;
    let sum: f64 = x.iter().sum();
    x.iter()
        .map(|&v| if include_self { sum / n } else { (sum - v) / (n - 1.0) })
        .collect()
}

fn check_len(op: &'static str, n: usize, params: &SiuParams, others: &[usize]) -> Result<()> {
    if params.num_labels() != n || others.iter().any(|&k| k != n) {
        return Err(Error::dim(op, format!("node vectors of length {n}, {others:?}; {} units", params.num_labels())));
    }
    Ok(())
}

/// Messages for the next iteration.
pub fn compute_messages(state: &SiState, params: &SiuParams, opts: SiOptions) -> Result<Vec<f64>> {
    let n = state.messages.len();
    check_len("compute_messages", n, params, &[state.fused.len(), state.predictions.len()])?;
    opts.check(n)?;
    let mu = means(&state.messages, opts.include_self);
    Ok((0..n)
        .map(|j| {
            let x = [mu[j], state.fused[j], state.predictions[j]];
            sigmoid(dot(&params.row(&params.msg_w, j), &x) + params.msg_b.values()[j])
        })
        .collect())
}

pub fn compute_correction_factors(
    messages: &[f64],
    fused: &[f64],
    prev_predictions: &[f64],
    params: &SiuParams,
    opts: SiOptions,
) -> Result<Vec<f64>> {
    let n = messages.len();
    check_len("compute_correction_factors", n, params, &[fused.len(), prev_predictions.len()])?;
    opts.check(n)?;
    let mu = means(messages, opts.include_self);
    Ok((0..n)
        .map(|j| {
            let x = [mu[j], fused[j], prev_predictions[j]];
            sigmoid(dot(&params.row(&params.gate_w, j), &x) + params.gate_b.values()[j])
        })
        .collect())
}

/// Gated message matrix indexed `[sender][recipient]`.
pub fn gate_messages(messages: &[f64], chi: &[f64], opts: SiOptions) -> Result<Vec<Vec<f64>>> {
    if messages.len() != chi.len() {
        return Err(Error::dim(
            "gate_messages",
            format!("{} messages, {} correction factors", messages.len(), chi.len()),
        ));
    }
    Ok(messages
        .iter()
        .zip(chi)
        .map(|(&m_i, &c_i)| {
            chi.iter()
                .map(|&c_j| if opts.correction_factors { 0.5 * (c_i + c_j) * m_i } else { m_i })
                .collect()
        })
        .collect())
}

pub fn compute_predictions(gated: &[Vec<f64>], fused: &[f64], params: &SiuParams, opts: SiOptions) -> Result<Vec<f64>> {
    let n = fused.len();
    check_len("compute_predictions", n, params, &[gated.len()])?;
    if gated.iter().any(|row| row.len() != n) {
        return Err(Error::dim("compute_predictions", "gated message matrix is not N×N"));
    }
    opts.check(n)?;
    Ok((0..n)
        .map(|j| {
            let (sum, count) = (0..n)
                .filter(|&i| opts.include_self || i != j)
                .fold((0.0, 0usize), |(s, c), i| (s + gated[i][j], c + 1));
            let x = [sum / count as f64, fused[j]];
            sigmoid(dot(&params.row(&params.pred_w, j), &x) + params.pred_b.values()[j])
        })
        .collect())
}

/// One full iteration.
pub fn si_step(state: &SiState, params: &SiuParams, opts: SiOptions) -> Result<SiState> {
    let m = compute_messages(state, params, opts)?;
    let chi = compute_correction_factors(&m, &state.fused, &state.predictions, params, opts)?;
    let gated = gate_messages(&m, &chi, opts)?;
    let y = compute_predictions(&gated, &state.fused, params, opts)?;
    Ok(SiState {
        t: state.t + 1,
        messages: m,
        chi: Some(chi),
        predictions: y,
        fused: state.fused.clone(),
    })
}

/// States `0..=steps`; the last one holds the final predictions.
pub fn si_unroll(f: &[f64], params: &SiuParams, steps: usize, opts: SiOptions) -> Result<Vec<SiState>> {
    let mut states = vec![si_init(f)];
    for _ in 0..steps {
        let next = si_step(states.last().expect("non-empty"), params, opts)?;
        states.push(next);
    }
    Ok(states)
}

pub fn chi_regularizer(states: &[SiState], r: f64) -> Result<f64> {
    if !(r >= 0.0) {
        return Err(Error::domain("chi_regularizer", format!("penalty weight {r} must be ≥ 0")));
    }
    let chis: Vec<f64> = states.iter().filter_map(|s| s.chi.as_ref()).flatten().copied().collect();
    if chis.is_empty() {
        return Ok(0.0);
    }
    Ok(r * chis.iter().sum::<f64>() / chis.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn running_params() -> SiuParams {
        let mut p = SiuParams::zeros(2);
        p.msg_w = Tensor::full([2, 3], 1.0);
        p.gate_w = Tensor::full([2, 3], 1.0);
        p.pred_w = Tensor::full([2, 2], 1.0);
        p
    }

    #[test]
    fn init_copies_fused() {
        let s = si_init(&[0.8, 0.2]);
        assert_eq!(s.messages, vec![0.8, 0.2]);
        assert_eq!(s.predictions, vec![0.8, 0.2]);
        assert!(s.chi.is_none());
        assert_eq!(si_init(&[0.5; 4]).messages, vec![0.5; 4]);
        assert_eq!(si_init(&[0.3]).predictions, vec![0.3]);
    }

    #[test]
    fn zero_params_give_one_half() {
        let p = SiuParams::zeros(3);
        let s = si_init(&[0.9, 0.1, 0.4]);
        let o = SiOptions::default();
        let m = compute_messages(&s, &p, o).unwrap();
        assert_eq!(m, vec![0.5; 3]);
        let chi = compute_correction_factors(&m, &s.fused, &s.predictions, &p, o).unwrap();
        assert_eq!(chi, vec![0.5; 3]);
        let g = gate_messages(&m, &chi, o).unwrap();
        assert_eq!(compute_predictions(&g, &s.fused, &p, o).unwrap(), vec![0.5; 3]);
    }

    #[test]
    fn saturated_message_bias() {
        let mut p = SiuParams::zeros(2);
        p.msg_b = Tensor::full([2], 10.0);
        let m = compute_messages(&si_init(&[0.3, 0.6]), &p, SiOptions::default()).unwrap();
        assert!((m[0] - sig(10.0)).abs() < 1e-15);
        assert!((m[0] - 0.99995).abs() < 1e-5);
    }

    #[test]
    fn running_two_node_example() {
        let p = running_params();
        let o = SiOptions::default();
        let f = [0.8, 0.2];
        let s = si_init(&f);
        // hand-evaluated reference
        let m_ref = [sig(0.5 + 0.8 + 0.8), sig(0.5 + 0.2 + 0.2)];
        let mu = (m_ref[0] + m_ref[1]) / 2.0;
        let chi_ref = [sig(mu + 0.8 + 0.8), sig(mu + 0.2 + 0.2)];
        let g21 = (chi_ref[1] + chi_ref[0]) / 2.0 * m_ref[1];
        let g11 = chi_ref[0] * m_ref[0];
        let y1 = sig((g11 + g21) / 2.0 + 0.8);

        let m = compute_messages(&s, &p, o).unwrap();
        assert!((m[0] - m_ref[0]).abs() < 1e-14 && (m[1] - m_ref[1]).abs() < 1e-14);
        assert!((m[0] - 0.8909).abs() < 1e-4 && (m[1] - 0.7110).abs() < 1e-4);
        let chi = compute_correction_factors(&m, &f, &s.predictions, &p, o).unwrap();
        assert!((chi[0] - 0.9169).abs() < 1e-4 && (chi[1] - 0.7687).abs() < 1e-4);
        let g = gate_messages(&m, &chi, o).unwrap();
        assert!((g[1][0] - g21).abs() < 1e-14);
        assert!((g[1][0] - 0.5992).abs() < 1e-4);
        assert!((g[0][0] - 0.8168).abs() < 1e-4);
        let y = compute_predictions(&g, &f, &p, o).unwrap();
        assert!((y[0] - y1).abs() < 1e-14);
        assert!((y[0] - 0.8188).abs() < 1e-4);

        let states = si_unroll(&f, &p, 1, o).unwrap();
        assert!((states[1].predictions[0] - y1).abs() < 1e-14);
    }

    #[test]
    fn gate_limits() {
        let m = [0.3, 0.7, 0.9];
        let o = SiOptions::default();
        assert_eq!(gate_messages(&m, &[1.0; 3], o).unwrap()[1], vec![0.7; 3]);
        assert!(gate_messages(&m, &[0.0; 3], o).unwrap().iter().flatten().all(|&v| v == 0.0));
        let ncf = SiOptions {
            correction_factors: false,
            ..o
        };
        assert_eq!(gate_messages(&m, &[0.2; 3], ncf).unwrap()[2], vec![0.9; 3]);
    }

    #[test]
    fn single_node_reduces_to_self_message() {
        let mut p = SiuParams::zeros(1);
        p.pred_w = Tensor::new([1, 2], vec![0.7, -0.4]).unwrap();
        p.pred_b = Tensor::full([1], 0.1);
        let states = si_unroll(&[0.6], &p, 1, SiOptions::default()).unwrap();
        let (m, c) = (states[1].messages[0], states[1].chi.as_ref().unwrap()[0]);
        let want = sig(0.7 * c * m - 0.4 * 0.6 + 0.1);
        assert!((states[1].predictions[0] - want).abs() < 1e-14);
    }

    #[test]
    fn zero_iterations_return_fused() {
        let p = running_params();
        let states = si_unroll(&[0.8, 0.2], &p, 0, SiOptions::default()).unwrap();
        assert_eq!(states.len(), 1);
        assert_eq!(states[0].predictions, vec![0.8, 0.2]);

        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let f = tape.constant(Tensor::new([1, 2], vec![0.8, 0.2]).unwrap());
        let (y, trace) = si_unroll_tape(&mut tape, &vars, f, 0, SiOptions::default()).unwrap();
        assert_eq!(y, f);
        assert!(trace.is_empty());
    }

    #[test]
    fn regularizer_examples() {
        let mut s = si_init(&[0.5, 0.5]);
        s.chi = Some(vec![0.5, 0.5]);
        let states = vec![si_init(&[0.5, 0.5]), s.clone(), s.clone()];
        assert!((chi_regularizer(&states, 5e-3).unwrap() - 0.0025).abs() < 1e-15);
        assert_eq!(chi_regularizer(&states, 0.0).unwrap(), 0.0);
        let mut half = s.clone();
        half.chi = Some(vec![0.25, 0.25]);
        let a = chi_regularizer(&[s.clone(), s.clone()], 0.1).unwrap();
        let b = chi_regularizer(&[half.clone(), half], 0.1).unwrap();
        assert!((b - a / 2.0).abs() < 1e-15);
        assert!(chi_regularizer(&states, -1.0).is_err());
    }

    #[test]
    fn tape_regularizer_matches_values() {
        let p = running_params();
        let f = [0.8, 0.2];
        let states = si_unroll(&f, &p, 3, SiOptions::default()).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let fv = tape.constant(Tensor::new([1, 2], f.to_vec()).unwrap());
        let (_, trace) = si_unroll_tape(&mut tape, &vars, fv, 3, SiOptions::default()).unwrap();
        let r = chi_regularizer_tape(&mut tape, &trace, 5e-3).unwrap();
        let want = chi_regularizer(&states, 5e-3).unwrap();
        assert!((tape.value(r).values()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn exclude_self_needs_two_nodes() {
        let o = SiOptions {
            include_self: false,
            ..SiOptions::default()
        };
        assert!(si_unroll(&[0.5], &SiuParams::zeros(1), 1, o).is_err());
        assert!(si_unroll(&[0.5, 0.4], &SiuParams::zeros(2), 1, o).is_ok());
    }
}
