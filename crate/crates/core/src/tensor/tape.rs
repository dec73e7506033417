use super::Tensor;
use crate::error::{Error, Result};

/// Variance floor added inside the batch-norm square root.
pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the previous running statistic in the batch-norm update.
pub const BN_MOMENTUM: f64 = 0.9;

const SIGMOID_LO: f64 = f64::MIN_POSITIVE;
const SIGMOID_HI: f64 = 1.0 - f64::EPSILON / 2.0;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    #[default]
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Infer,
}

/// Running statistics of one batch-norm layer.
///
/// Starts uninitialized; the first training-mode pass seeds the statistics
/// with that batch's moments and later passes blend with [`BN_MOMENTUM`].
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    initialized: bool,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            initialized: false,
        }
    }

    /// Initialized state with zero mean and unit variance.
    pub fn identity(channels: usize) -> Self {
        Self {
            initialized: true,
            ..Self::new(channels)
        }
    }

    pub fn from_parts(mean: Vec<f64>, var: Vec<f64>, initialized: bool) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::dim("batch_norm_state", "mean/var length mismatch"));
        }
        Ok(Self {
            running_mean: mean,
            running_var: var,
            initialized,
        })
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn running_mean(&self) -> &[f64] {
        &self.running_mean
    }

    pub fn running_var(&self) -> &[f64] {
        &self.running_var
    }

    fn update(&mut self, mean: &[f64], var: &[f64]) {
        if self.initialized {
            for (r, m) in self.running_mean.iter_mut().zip(mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
            }
            for (r, v) in self.running_var.iter_mut().zip(var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
            }
        } else {
            self.running_mean.copy_from_slice(mean);
            self.running_var.copy_from_slice(var);
            self.initialized = true;
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        filters: Var,
        stride: usize,
        pad_top: usize,
        pad_left: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Mean {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    MeanAll(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale {
        x: Var,
        alpha: f64,
    },
    Offset(Var),
    Reshape(Var),
    Select {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
        index: usize,
    },
    Stack {
        xs: Vec<Var>,
        outer: usize,
        inner: usize,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::Conv2d { x, filters, .. } => vec![*x, *filters],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Ln(x)
            | Op::MeanAll(x)
            | Op::Offset(x)
            | Op::Reshape(x)
            | Op::Clamp { x, .. }
            | Op::Mean { x, .. }
            | Op::Scale { x, .. }
            | Op::Select { x, .. } => vec![*x],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Stack { xs, .. } => xs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation.
///
/// Every operation's inputs are recorded before its output, so the node
/// order is a topological order and backward is one reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any) into `t`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(SIGMOID_LO, SIGMOID_HI)
}

/// Right-aligned broadcast of two shapes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out`, the flat index into an operand of `shape`.
fn broadcast_map(out: &[usize], shape: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut idx = 0usize;
    for _ in 0..total {
        map.push(idx);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            idx += strides[ax];
            if counter[ax] < out[ax] {
                break;
            }
            idx -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    map
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => value.requires_grad(),
            other => other.inputs().iter().any(|i| self.nodes[i.0].requires_grad),
        };
        let value = Tensor::new(value.shape().to_vec(), value.into_values()).expect("shape checked");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; gradients are tracked when `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Records a copy of a parameter tensor, keeping its `requires_grad` flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let copy = Tensor::new(t.shape().to_vec(), t.values().to_vec())
            .expect("valid tensor")
            .with_requires_grad(t.requires_grad());
        self.push(copy, Op::Leaf)
    }

    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(true), Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn vals(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    /// `x[B×I] · w[I×O] + b[O]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || bs[0] != ws[1] {
            return Err(Error::dim(
                "affine",
                format!("x {xs:?}, W {ws:?}, b {bs:?}"),
            ));
        }
        let (rows, inner, cols) = (xs[0], xs[1], ws[1]);
        let (xv, wv, bv) = (self.vals(x), self.vals(w), self.vals(b));
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let mut acc = vec![0.0; cols];
            for k in 0..inner {
                let a = xv[r * inner + k];
                let wrow = &wv[k * cols..(k + 1) * cols];
                for (o, &wk) in acc.iter_mut().zip(wrow) {
                    *o += a * wk;
                }
            }
            out.extend(acc.iter().zip(bv).map(|(a, b)| a + b));
        }
        let value = Tensor::new([rows, cols], out)?;
        Ok(self.push(value, Op::Affine { x, w, b }))
    }

    /// Cross-correlation of `x[B×H×W×C]` with `filters[K×K×C×F]`.
    pub fn conv2d(&mut self, x: Var, filters: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (xs, fs) = (self.shape(x).to_vec(), self.shape(filters).to_vec());
        if xs.len() != 4 || fs.len() != 4 || fs[0] != fs[1] || fs[2] != xs[3] {
            return Err(Error::dim("conv2d", format!("input {xs:?}, filters {fs:?}")));
        }
        if stride == 0 {
            return Err(Error::domain("conv2d", "stride must be positive"));
        }
        let (batch, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, nf) = (fs[0], fs[3]);
        let (oh, ow, pad_top, pad_left) = match padding {
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let ph = ((oh.max(1) - 1) * stride + k).saturating_sub(h);
                let pw = ((ow.max(1) - 1) * stride + k).saturating_sub(w);
                (oh, ow, ph / 2, pw / 2)
            }
            Padding::Valid => {
                if k > h || k > w {
                    return Err(Error::dim(
                        "conv2d",
                        format!("kernel {k}x{k} larger than input {h}x{w}"),
                    ));
                }
                ((h - k) / stride + 1, (w - k) / stride + 1, 0, 0)
            }
        };
        let xv = self.vals(x);
        let fv = self.vals(filters);
        let mut out = vec![0.0; batch * oh * ow * nf];
        for b in 0..batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let obase = ((b * oh + oy) * ow + ox) * nf;
                    let acc = &mut out[obase..obase + nf];
                    for ky in 0..k {
                        let Some(iy) = (oy * stride + ky).checked_sub(pad_top).filter(|&v| v < h) else {
                            continue;
                        };
                        for kx in 0..k {
                            let Some(ix) = (ox * stride + kx).checked_sub(pad_left).filter(|&v| v < w) else {
                                continue;
                            };
                            let xbase = ((b * h + iy) * w + ix) * c;
                            let fbase = (ky * k + kx) * c * nf;
                            for ci in 0..c {
                                let a = xv[xbase + ci];
                                let frow = &fv[fbase + ci * nf..fbase + (ci + 1) * nf];
                                for (o, &fw) in acc.iter_mut().zip(frow) {
                                    *o += a * fw;
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new([batch, oh, ow, nf], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                filters,
                stride,
                pad_top,
                pad_left,
            },
        ))
    }

    /// Per-channel normalization over every axis but the last.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        mode: BatchNormMode,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().ok_or_else(|| Error::dim("batch_norm", "scalar input"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || state.channels() != c {
            return Err(Error::dim(
                "batch_norm",
                format!(
                    "input {xs:?} with gamma {:?}, beta {:?}, state of {} channels",
                    self.shape(gamma),
                    self.shape(beta),
                    state.channels()
                ),
            ));
        }
        let xv = self.vals(x);
        let count = xv.len() / c.max(1);
        let (mean, var, train) = match mode {
            BatchNormMode::Train => {
                if count == 0 {
                    return Err(Error::domain("batch_norm", "empty batch"));
                }
                let mut mean = vec![0.0; c];
                for row in xv.chunks_exact(c) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                let mut var = vec![0.0; c];
                for row in xv.chunks_exact(c) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= count as f64);
                state.update(&mean, &var);
                (mean, var, true)
            }
            BatchNormMode::Infer => {
                if !state.is_initialized() {
                    return Err(Error::State(
                        "batch-norm running statistics are uninitialized; run a training pass first".into(),
                    ));
                }
                (state.running_mean.clone(), state.running_var.clone(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let (gv, bv) = (self.vals(gamma), self.vals(beta));
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks_exact(c) {
            for ch in 0..c {
                let n = (row[ch] - mean[ch]) * inv_std[ch];
                xhat.push(n);
                out.push(gv[ch] * n + bv[ch]);
            }
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        ))
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.values().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        self.push(value, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Logistic sigmoid; outputs are kept strictly inside (0, 1).
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.vals(x).iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::domain("ln", format!("non-positive argument {bad}")));
        }
        Ok(self.map_unary(x, f64::ln, Op::Ln(x)))
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input was inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map_unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Var {
        self.map_unary(x, |v| alpha * v, Op::Scale { x, alpha })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map_unary(x, |v| v + c, Op::Offset(x))
    }

    /// Arithmetic mean along `axis`, which is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::domain("mean", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        if n == 0 {
            return Err(Error::domain("mean", format!("empty extent on axis {axis}")));
        }
        let xv = self.vals(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &xv[(o * n + i) * inner..(o * n + i + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, b)| *a += b);
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Mean { x, outer, n, inner }))
    }

    /// Mean of every element, as a scalar.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let xv = self.vals(x);
        if xv.is_empty() {
            return Err(Error::domain("mean_all", "empty tensor"));
        }
        let m = xv.iter().sum::<f64>() / xv.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::MeanAll(x)))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let value = if sa == sb {
            let out = self.vals(a).iter().zip(self.vals(b)).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(sa.to_vec(), out)?
        } else {
            let out_shape = broadcast_shape(sa, sb)
                .ok_or_else(|| Error::dim(name, format!("cannot broadcast {sa:?} with {sb:?}")))?;
            let (ma, mb) = (broadcast_map(&out_shape, sa), broadcast_map(&out_shape, sb));
            let (va, vb) = (self.vals(a), self.vals(b));
            let out = ma.iter().zip(&mb).map(|(&i, &j)| f(va[i], vb[j])).collect();
            Tensor::new(out_shape, out)?
        };
        Ok(self.push(value, op))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(shape.into(), t.values().to_vec())
            .map_err(|_| Error::dim("reshape", format!("cannot view {:?} with that shape", t.shape())))?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Picks one slice along `axis`, dropping that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::domain("select", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        if index >= n {
            return Err(Error::Index {
                what: "select axis",
                index,
                len: n,
            });
        }
        let xv = self.vals(x);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * n + index) * inner;
            out.extend_from_slice(&xv[start..start + inner]);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Select {
                x,
                outer,
                n,
                inner,
                index,
            },
        ))
    }

    /// Stacks equally shaped values along a new axis.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::domain("stack", "no inputs"))?;
        let shape = self.shape(*first).to_vec();
        if axis > shape.len() {
            return Err(Error::domain("stack", format!("axis {axis} for shape {shape:?}")));
        }
        if let Some(bad) = xs.iter().find(|v| self.shape(**v) != shape.as_slice()) {
            return Err(Error::dim(
                "stack",
                format!("{:?} vs {shape:?}", self.shape(*bad)),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let mut out = Vec::with_capacity(outer * inner * xs.len());
        for o in 0..outer {
            for v in xs {
                out.extend_from_slice(&self.vals(*v)[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape.insert(axis, xs.len());
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Stack {
                xs: xs.to_vec(),
                outer,
                inner,
            },
        ))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_node = self
            .nodes
            .get(output.0)
            .ok_or_else(|| Error::Contract(format!("output {output:?} is not on this tape")))?;
        if out_node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for input in node.op.inputs() {
                if input.0 >= idx {
                    return Err(Error::Contract(format!(
                        "tape is not topologically ordered at node {idx}"
                    )));
                }
            }
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (rows, inner, cols) = (xs[0], xs[1], ws[1]);
                let (xv, wv) = (self.vals(*x), self.vals(*w));
                if self.needs(*x) {
                    let dx = slot(grads, *x, rows * inner);
                    for r in 0..rows {
                        let grow = &g[r * cols..(r + 1) * cols];
                        for k in 0..inner {
                            let wrow = &wv[k * cols..(k + 1) * cols];
                            dx[r * inner + k] += grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if self.needs(*w) {
                    let dw = slot(grads, *w, inner * cols);
                    for r in 0..rows {
                        let grow = &g[r * cols..(r + 1) * cols];
                        for k in 0..inner {
                            let a = xv[r * inner + k];
                            dw[k * cols..(k + 1) * cols]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(d, gg)| *d += a * gg);
                        }
                    }
                }
                if self.needs(*b) {
                    let db = slot(grads, *b, cols);
                    for grow in g.chunks_exact(cols) {
                        db.iter_mut().zip(grow).for_each(|(d, gg)| *d += gg);
                    }
                }
            }
            Op::Conv2d {
                x,
                filters,
                stride,
                pad_top,
                pad_left,
            } => self.conv2d_backward(*x, *filters, *stride, *pad_top, *pad_left, node.value.shape(), g, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let count = xhat.len() / c;
                let gv = self.vals(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        dgamma[ch] += grow[ch] * hrow[ch];
                        dbeta[ch] += grow[ch];
                    }
                }
                if self.needs(*x) {
                    let dx = slot(grads, *x, xhat.len());
                    if *train {
                        let n = count as f64;
                        for (i, (grow, hrow)) in g.chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate() {
                            for ch in 0..c {
                                // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
                                let dxhat = grow[ch] * gv[ch];
                                dx[i * c + ch] += inv_std[ch] / n
                                    * (n * dxhat - gv[ch] * dbeta[ch] - hrow[ch] * gv[ch] * dgamma[ch]);
                            }
                        }
                    } else {
                        for (i, grow) in g.chunks_exact(c).enumerate() {
                            for ch in 0..c {
                                dx[i * c + ch] += grow[ch] * gv[ch] * inv_std[ch];
                            }
                        }
                    }
                }
                if self.needs(*gamma) {
                    slot(grads, *gamma, c).iter_mut().zip(&dgamma).for_each(|(d, v)| *d += v);
                }
                if self.needs(*beta) {
                    slot(grads, *beta, c).iter_mut().zip(&dbeta).for_each(|(d, v)| *d += v);
                }
            }
            Op::Relu(x) => {
                let xv = self.vals(*x);
                let dx = slot(grads, *x, g.len());
                for ((d, &gg), &v) in dx.iter_mut().zip(g).zip(xv) {
                    if v > 0.0 {
                        *d += gg;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let out = node.value.values();
                let dx = slot(grads, *x, g.len());
                for ((d, &gg), &s) in dx.iter_mut().zip(g).zip(out) {
                    *d += gg * s * (1.0 - s);
                }
            }
            Op::Ln(x) => {
                let xv = self.vals(*x);
                let dx = slot(grads, *x, g.len());
                for ((d, &gg), &v) in dx.iter_mut().zip(g).zip(xv) {
                    *d += gg / v;
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.vals(*x);
                let dx = slot(grads, *x, g.len());
                for ((d, &gg), &v) in dx.iter_mut().zip(g).zip(xv) {
                    if v >= *lo && v <= *hi {
                        *d += gg;
                    }
                }
            }
            Op::Mean { x, outer, n, inner } => {
                let dx = slot(grads, *x, outer * n * inner);
                let scale = 1.0 / *n as f64;
                for o in 0..*outer {
                    let grow = &g[o * inner..(o + 1) * inner];
                    for i in 0..*n {
                        let base = (o * n + i) * inner;
                        dx[base..base + inner]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, gg)| *d += gg * scale);
                    }
                }
            }
            Op::MeanAll(x) => {
                let len = self.vals(*x).len();
                let share = g[0] / len as f64;
                slot(grads, *x, len).iter_mut().for_each(|d| *d += share);
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let out_shape = node.value.shape();
                let sign_b = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let is_mul = matches!(node.op, Op::Mul(..));
                for (target, other, sign) in [(*a, *b, 1.0), (*b, *a, sign_b)] {
                    if !self.needs(target) {
                        continue;
                    }
                    let ts = self.shape(target);
                    let os = self.shape(other);
                    let tmap = (ts != out_shape).then(|| broadcast_map(out_shape, ts));
                    let omap = (is_mul && os != out_shape).then(|| broadcast_map(out_shape, os));
                    let ov = self.vals(other);
                    let d = slot(grads, target, self.vals(target).len());
                    for (o, &gg) in g.iter().enumerate() {
                        let ti = tmap.as_ref().map_or(o, |m| m[o]);
                        let factor = if is_mul {
                            ov[omap.as_ref().map_or(o, |m| m[o])]
                        } else {
                            sign
                        };
                        d[ti] += gg * factor;
                    }
                }
            }
            Op::Scale { x, alpha } => {
                let dx = slot(grads, *x, g.len());
                dx.iter_mut().zip(g).for_each(|(d, gg)| *d += alpha * gg);
            }
            Op::Offset(x) | Op::Reshape(x) => {
                let dx = slot(grads, *x, g.len());
                dx.iter_mut().zip(g).for_each(|(d, gg)| *d += gg);
            }
            Op::Select {
                x,
                outer,
                n,
                inner,
                index,
            } => {
                let dx = slot(grads, *x, outer * n * inner);
                for o in 0..*outer {
                    let start = (o * n + index) * inner;
                    dx[start..start + inner]
                        .iter_mut()
                        .zip(&g[o * inner..(o + 1) * inner])
                        .for_each(|(d, gg)| *d += gg);
                }
            }
            Op::Stack { xs, outer, inner } => {
                let k = xs.len();
                for (pos, v) in xs.iter().enumerate() {
                    if !self.needs(*v) {
                        continue;
                    }
                    let dx = slot(grads, *v, outer * inner);
                    for o in 0..*outer {
                        let src = &g[(o * k + pos) * inner..(o * k + pos + 1) * inner];
                        dx[o * inner..(o + 1) * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, gg)| *d += gg);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        filters: Var,
        stride: usize,
        pad_top: usize,
        pad_left: usize,
        out_shape: &[usize],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let xs = self.shape(x);
        let (batch, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let fs = self.shape(filters);
        let (k, nf) = (fs[0], fs[3]);
        let (oh, ow) = (out_shape[1], out_shape[2]);
        let xv = self.vals(x);
        let fv = self.vals(filters);
        let need_x = self.needs(x);
        let need_f = self.needs(filters);
        let mut dx = need_x.then(|| vec![0.0; xv.len()]);
        let mut df = need_f.then(|| vec![0.0; fv.len()]);
        for b in 0..batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let obase = ((b * oh + oy) * ow + ox) * nf;
                    let grow = &g[obase..obase + nf];
                    for ky in 0..k {
                        let Some(iy) = (oy * stride + ky).checked_sub(pad_top).filter(|&v| v < h) else {
                            continue;
                        };
                        for kx in 0..k {
                            let Some(ix) = (ox * stride + kx).checked_sub(pad_left).filter(|&v| v < w) else {
                                continue;
                            };
                            let xbase = ((b * h + iy) * w + ix) * c;
                            let fbase = (ky * k + kx) * c * nf;
                            for ci in 0..c {
                                let frange = fbase + ci * nf..fbase + (ci + 1) * nf;
                                if let Some(dx) = dx.as_mut() {
                                    dx[xbase + ci] +=
                                        grow.iter().zip(&fv[frange.clone()]).map(|(a, b)| a * b).sum::<f64>();
                                }
                                if let Some(df) = df.as_mut() {
                                    let a = xv[xbase + ci];
                                    df[frange].iter_mut().zip(grow).for_each(|(d, gg)| *d += a * gg);
                                }
                            }
                        }
                    }
                }
            }
        }
        for (v, d) in [(x, dx), (filters, df)] {
            if let Some(d) = d {
                slot(grads, v, d.len()).iter_mut().zip(&d).for_each(|(a, b)| *a += b);
            }
        }
    }
}
