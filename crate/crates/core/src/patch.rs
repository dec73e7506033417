//! Per-stream patch CNNs producing one probability per label.

use rand::Rng;

use crate::data::{ClassStats, PatchGeometry};
use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, BatchNormState, Padding, Tape, Tensor, Var};

/// Half-width of the uniform initialization interval for weights and biases.
pub const INIT_SCALE: f64 = 0.05;

const MIN_LOCAL_SIDE: usize = 16;

/// Filter and neuron counts of the patch CNN.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TopologyWidths {
    /// The four stride-2 blocks every stream ends with.
    pub conv: Vec<usize>,
    /// Extra leading blocks, consumed from the back, for inputs larger than `local_side`.
    pub lead: Vec<usize>,
    pub fc_hidden: usize,
    pub kernel: usize,
    /// Side length of a local patch; larger inputs must be `local_side * 2^k`.
    pub local_side: usize,
}

impl Default for TopologyWidths {
    fn default() -> Self {
        Self {
            conv: vec![32, 64, 96, 128],
            lead: vec![16, 24],
            fc_hidden: 256,
            kernel: 3,
            local_side: 56,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvBlockPlan {
    pub in_channels: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Resolved layer sequence for one input geometry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPlan {
    pub input: PatchGeometry,
    pub blocks: Vec<ConvBlockPlan>,
    /// Spatial side before the first block and after each block.
    pub spatial_trace: Vec<usize>,
    pub flat_features: usize,
    pub fc_hidden: usize,
    pub outputs: usize,
}

impl LayerPlan {
    pub fn num_parameters(&self) -> usize {
        let conv: usize = self
            .blocks
            .iter()
            .map(|b| b.kernel * b.kernel * b.in_channels * b.filters + 2 * b.filters)
            .sum();
        conv + self.flat_features * self.fc_hidden + self.fc_hidden + self.fc_hidden * self.outputs + self.outputs
    }
}

/// Plans `[conv s2 + BN + ReLU]*` → flatten → FC + ReLU → FC + sigmoid.
pub fn build_topology(input: PatchGeometry, num_labels: usize, widths: &TopologyWidths) -> Result<LayerPlan> {
    let fail = |m: String| Err(Error::dim("build_topology", m));
    if num_labels == 0 {
        return fail("need at least one output label".into());
    }
    if input.height != input.width {
        return fail(format!("input {input} is not square"));
    }
    if widths.local_side < MIN_LOCAL_SIDE {
        return fail(format!(
            "local side {} cannot take four stride-2 halvings (minimum {MIN_LOCAL_SIDE})",
            widths.local_side
        ));
    }
    let side = input.height;
    if side % widths.local_side != 0 || !(side / widths.local_side).is_power_of_two() {
        return fail(format!(
            "input side {side} is not the local side {} times a power of two",
            widths.local_side
        ));
    }
    let extra = (side / widths.local_side).trailing_zeros() as usize;
    if extra > widths.lead.len() {
        return fail(format!(
            "input side {side} needs {extra} leading blocks but only {} are configured",
            widths.lead.len()
        ));
    }
    if widths.conv.is_empty() || widths.kernel == 0 {
        return fail("empty convolution plan".into());
    }
    let filters: Vec<usize> = widths.lead[widths.lead.len() - extra..]
        .iter()
        .chain(&widths.conv)
        .copied()
        .collect();
    let mut blocks = Vec::with_capacity(filters.len());
    let mut trace = vec![side];
    let mut channels = input.channels;
    let mut s = side;
    for f in filters {
        blocks.push(ConvBlockPlan {
            in_channels: channels,
            filters: f,
            kernel: widths.kernel,
            stride: 2,
        });
        s = s.div_ceil(2);
        trace.push(s);
        channels = f;
    }
    Ok(LayerPlan {
        input,
        blocks,
        spatial_trace: trace,
        flat_features: s * s * channels,
        fc_hidden: widths.fc_hidden,
        outputs: num_labels,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub filters: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub bn: BatchNormState,
}

/// Parameters of one patch stream.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchNet {
    plan: LayerPlan,
    pub blocks: Vec<ConvBlock>,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

/// Tape handles for one bound [`PatchNet`].
#[derive(Debug, Clone)]
pub struct PatchNetVars {
    blocks: Vec<[Var; 3]>,
    fc: [Var; 4],
}

impl PatchNetVars {
    /// Same order as [`PatchNet::params_mut`].
    pub fn all(&self) -> Vec<Var> {
        self.blocks.iter().flatten().copied().chain(self.fc).collect()
    }
}

fn uniform<R: Rng>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n).map(|_| rng.random_range(-scale..=scale)).collect();
    Tensor::new(shape.to_vec(), v).expect("shape")
}

impl PatchNet {
    fn build(plan: LayerPlan, mut make: impl FnMut(&[usize]) -> Tensor) -> Self {
        let blocks = plan
            .blocks
            .iter()
            .map(|b| ConvBlock {
                filters: make(&[b.kernel, b.kernel, b.in_channels, b.filters]),
                gamma: Tensor::full([b.filters], 1.0),
                beta: Tensor::zeros([b.filters]),
                bn: BatchNormState::new(b.filters),
            })
            .collect();
        Self {
            fc1_w: make(&[plan.flat_features, plan.fc_hidden]),
            fc1_b: make(&[plan.fc_hidden]),
            fc2_w: make(&[plan.fc_hidden, plan.outputs]),
            fc2_b: make(&[plan.outputs]),
            blocks,
            plan,
        }
    }

    /// Weights and biases uniform in `[-scale, scale]`; batch-norm at γ=1, β=0.
    pub fn init<R: Rng>(plan: LayerPlan, rng: &mut R, scale: f64) -> Self {
        Self::build(plan, |s| uniform(rng, s, scale))
    }

    pub fn zeros(plan: LayerPlan) -> Self {
        Self::build(plan, |s| Tensor::zeros(s.to_vec()))
    }

    pub fn plan(&self) -> &LayerPlan {
        &self.plan
    }

    pub fn num_parameters(&self) -> usize {
        self.plan.num_parameters()
    }

    /// True once every batch-norm layer has running statistics.
    pub fn bn_ready(&self) -> bool {
        self.blocks.iter().all(|b| b.bn.is_initialized())
    }

    /// Named trainable tensors in binding order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("conv{i}.filters"), &b.filters));
            out.push((format!("conv{i}.gamma"), &b.gamma));
            out.push((format!("conv{i}.beta"), &b.beta));
        }
        out.push(("fc1.w".into(), &self.fc1_w));
        out.push(("fc1.b".into(), &self.fc1_b));
        out.push(("fc2.w".into(), &self.fc2_w));
        out.push(("fc2.b".into(), &self.fc2_b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.filters);
            out.push(&mut b.gamma);
            out.push(&mut b.beta);
        }
        out.extend([&mut self.fc1_w, &mut self.fc1_b, &mut self.fc2_w, &mut self.fc2_b]);
        out
    }

    /// Number of leading tensors in `params_mut` that belong to conv blocks.
    pub fn conv_param_count(&self) -> usize {
        3 * self.blocks.len()
    }

    /// Marks which groups receive gradients and optimizer updates.
    pub fn set_trainable(&mut self, conv: bool, fc: bool) {
        let split = self.conv_param_count();
        for (i, t) in self.params_mut().into_iter().enumerate() {
            t.set_requires_grad(if i < split { conv } else { fc });
        }
    }

    /// Records the parameters on `tape`, tracking gradients where the tensor asks for them.
    pub fn bind(&self, tape: &mut Tape) -> PatchNetVars {
        let blocks = self
            .blocks
            .iter()
            .map(|b| [tape.param(&b.filters), tape.param(&b.gamma), tape.param(&b.beta)])
            .collect();
        let fc = [
            tape.param(&self.fc1_w),
            tape.param(&self.fc1_b),
            tape.param(&self.fc2_w),
            tape.param(&self.fc2_b),
        ];
        PatchNetVars { blocks, fc }
    }

    /// Batched forward of `input[B×H×W×C]` to probabilities `[B×N]`.
    ///
    /// Train mode updates the batch-norm running statistics.
    pub fn forward(&mut self, tape: &mut Tape, vars: &PatchNetVars, input: Var, mode: BatchNormMode) -> Result<Var> {
        let shape = tape.value(input).shape().to_vec();
        let want = self.plan.input.shape();
        if shape.len() != 4 || shape[1..] != want[..] {
            return Err(Error::dim(
                "patchnet_forward",
                format!("input {shape:?} does not match stream geometry {}", self.plan.input),
            ));
        }
        let batch = shape[0];
        let mut h = input;
        for (block, [f, g, b]) in self.blocks.iter_mut().zip(&vars.blocks) {
            let c = tape.conv2d(h, *f, 2, Padding::Same)?;
            let n = tape.batch_norm(c, *g, *b, &mut block.bn, mode)?;
            h = tape.relu(n);
        }
        let flat = tape.reshape(h, [batch, self.plan.flat_features])?;
        let [w1, b1, w2, b2] = vars.fc;
        let hidden = tape.affine(flat, w1, b1)?;
        let hidden = tape.relu(hidden);
        let logits = tape.affine(hidden, w2, b2)?;
        Ok(tape.sigmoid(logits))
    }
}

/// Stacks `h×w×c` images into one `[B×h×w×c]` tensor.
pub fn batch_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::domain("batch_images", "empty batch"))?;
    let shape = first.shape().to_vec();
    let mut values = Vec::with_capacity(first.len() * images.len());
    for im in images {
        if im.shape() != shape.as_slice() {
            return Err(Error::dim(
                "batch_images",
                format!("{:?} vs {shape:?}", im.shape()),
            ));
        }
        values.extend_from_slice(im.values());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::new(full, values)
}

/// Single-patch inference helper.
pub fn patchnet_forward(patch: &Tensor, net: &mut PatchNet, mode: BatchNormMode) -> Result<Vec<f64>> {
    let batch = batch_images(&[patch])?;
    let mut tape = Tape::new();
    let vars = net.bind(&mut tape);
    let x = tape.constant(batch);
    let p = net.forward(&mut tape, &vars, x, mode)?;
    Ok(tape.value(p).values().to_vec())
}

/// `[B×N]` 0/1 label tensor.
pub fn label_tensor(labels: &[&[u8]]) -> Result<Tensor> {
    let n = labels.first().map_or(0, |l| l.len());
    if labels.iter().any(|l| l.len() != n) {
        return Err(Error::dim("label_tensor", "ragged label rows"));
    }
    Tensor::new(
        [labels.len(), n],
        labels.iter().flat_map(|l| l.iter().map(|&y| y as f64)).collect(),
    )
}

/// Class-weighted squared error, `(1/N) Σ_j c_j (p_j - y_j)^2` averaged over the batch,
/// with `c_j = w_pos_j` on positives and 1 on negatives.
pub fn weighted_l2_loss(tape: &mut Tape, p: Var, labels: &Tensor, stats: &ClassStats) -> Result<Var> {
    let shape = tape.value(p).shape().to_vec();
    if shape != labels.shape() || shape.len() != 2 || shape[1] != stats.pos_weight.len() {
        return Err(Error::dim(
            "weighted_l2_loss",
            format!(
                "predictions {shape:?}, labels {:?}, {} class weights",
                labels.shape(),
                stats.pos_weight.len()
            ),
        ));
    }
    let n = shape[1];
    let weights: Vec<f64> = labels
        .values()
        .iter()
        .enumerate()
        .map(|(i, &y)| if y > 0.5 { stats.pos_weight[i % n] } else { 1.0 })
        .collect();
    let w = tape.constant(Tensor::new(shape, weights)?);
    let y = tape.constant(labels.clone());
    let d = tape.sub(p, y)?;
    let sq = tape.mul(d, d)?;
    let weighted = tape.mul(sq, w)?;
    tape.mean_all(weighted)
}
