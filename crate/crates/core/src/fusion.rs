//! Per-label fusion of the stream predictions.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_FUSION_HIDDEN: usize = 64;
const BCE_CLAMP: f64 = 1e-12;

/// `FC(P→H) + sigmoid → FC(H→1) + sigmoid` for one label.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionUnit {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FusionUnit {
    fn build(streams: usize, hidden: usize, make: &mut impl FnMut(&[usize]) -> Tensor) -> Self {
        Self {
            w1: make(&[streams, hidden]),
            b1: make(&[hidden]),
            w2: make(&[hidden, 1]),
            b2: make(&[1]),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// One independent fusion unit per label.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub units: Vec<FusionUnit>,
}

impl FusionParams {
    fn build(labels: usize, streams: usize, hidden: usize, mut make: impl FnMut(&[usize]) -> Tensor) -> Self {
        Self {
            units: (0..labels)
                .map(|_| FusionUnit::build(streams, hidden, &mut make))
                .collect(),
        }
    }

    pub fn init<R: Rng>(labels: usize, streams: usize, hidden: usize, rng: &mut R, scale: f64) -> Self {
        Self::build(labels, streams, hidden, |s| {
            let n = s.iter().product();
            Tensor::new(s.to_vec(), (0..n).map(|_| rng.random_range(-scale..=scale)).collect())
                .expect("shape")
        })
    }

    pub fn zeros(labels: usize, streams: usize, hidden: usize) -> Self {
        Self::build(labels, streams, hidden, |s| Tensor::zeros(s.to_vec()))
    }

    pub fn num_labels(&self) -> usize {
        self.units.len()
    }

    pub fn num_streams(&self) -> usize {
        self.units.first().map_or(0, |u| u.w1.shape()[0])
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let names = ["w1", "b1", "w2", "b2"];
        self.units
            .iter()
            .enumerate()
            .flat_map(|(j, u)| names.iter().zip(u.tensors()).map(move |(n, t)| (format!("unit{j}.{n}"), t)))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.units.iter_mut().flat_map(|u| u.tensors_mut()).collect()
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.params_mut().into_iter().for_each(|t| t.set_requires_grad(on));
    }

    /// Handles in the order of [`FusionParams::params_mut`].
    pub fn bind(&self, tape: &mut Tape) -> Vec<[Var; 4]> {
        self.units.iter().map(|u| u.tensors().map(|t| tape.param(t))).collect()
    }

    /// Fuses per-stream predictions `[B×N]` (one per stream) into `[B×N]`.
    pub fn forward(&self, tape: &mut Tape, vars: &[[Var; 4]], streams: &[Var]) -> Result<Var> {
        if streams.len() != self.num_streams() {
            return Err(Error::dim(
                "fusion_forward",
                format!("{} stream predictions for {} fusion inputs", streams.len(), self.num_streams()),
            ));
        }
        let p = tape.stack(streams, 1)?;
        let shape = tape.value(p).shape().to_vec();
        if shape[2] != self.num_labels() {
            return Err(Error::dim(
                "fusion_forward",
                format!("predictions cover {} labels, fusion has {}", shape[2], self.num_labels()),
            ));
        }
        let batch = shape[0];
        let mut fused = Vec::with_capacity(vars.len());
        for (j, [w1, b1, w2, b2]) in vars.iter().enumerate() {
            let s = tape.select(p, 2, j)?;
            let h = tape.affine(s, *w1, *b1)?;
            let h = tape.sigmoid(h);
            let o = tape.affine(h, *w2, *b2)?;
            fused.push(tape.sigmoid(o));
        }
        let f = tape.stack(&fused, 1)?;
        tape.reshape(f, [batch, self.num_labels()])
    }
}

/// Column `j` of a `P×N` prediction matrix.
pub fn gather_au_scores(predictions: &[Vec<f64>], j: usize) -> Result<Vec<f64>> {
    predictions
        .iter()
        .map(|row| {
            row.get(j).copied().ok_or(Error::Index {
                what: "label",
                index: j,
                len: row.len(),
            })
        })
        .collect()
}

/// Scalar evaluation of one fusion unit.
pub fn fusion_forward(scores: &[f64], unit: &FusionUnit) -> Result<f64> {
    let streams = unit.w1.shape()[0];
    if scores.len() != streams {
        return Err(Error::dim(
            "fusion_forward",
            format!("{} scores for a {streams}-input unit", scores.len()),
        ));
    }
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new([1, streams], scores.to_vec())?);
    let [w1, b1, w2, b2] = unit.tensors().map(|t| tape.constant(t.clone()));
    let h = tape.affine(x, w1, b1)?;
    let h = tape.sigmoid(h);
    let o = tape.affine(h, w2, b2)?;
    let f = tape.sigmoid(o);
    Ok(tape.value(f).values()[0])
}

/// Mean binary cross-entropy over batch and labels, inputs clamped away from 0 and 1.
pub fn bce_loss(tape: &mut Tape, f: Var, labels: &Tensor) -> Result<Var> {
    if tape.value(f).shape() != labels.shape() {
        return Err(Error::dim(
            "bce_loss",
            format!("predictions {:?} vs labels {:?}", tape.value(f).shape(), labels.shape()),
        ));
    }
    let f = tape.clamp(f, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let y = tape.constant(labels.clone());
    let not_y = tape.constant(Tensor::new(
        labels.shape().to_vec(),
        labels.values().iter().map(|v| 1.0 - v).collect(),
    )?);
    let ln_f = tape.ln(f)?;
    let neg = tape.scale(f, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let ln_not = tape.ln(one_minus)?;
    let a = tape.mul(y, ln_f)?;
    let b = tape.mul(not_y, ln_not)?;
    let s = tape.add(a, b)?;
    let m = tape.mean_all(s)?;
    Ok(tape.scale(m, -1.0))
}
