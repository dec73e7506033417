//! The assembled network: patch streams, fusion and structure inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PatchGeometry};
use crate::error::{Error, Result};
use crate::fusion::{FusionParams, DEFAULT_FUSION_HIDDEN};
use crate::patch::{batch_images, build_topology, PatchNet, PatchNetVars, TopologyWidths, INIT_SCALE};
use crate::structure::{si_unroll_tape, SiOptions, SiStepVars, SiuParams, SiuVars, DEFAULT_ITERATIONS};
use crate::tensor::{BatchNormMode, BatchNormState, Tape, Tensor, Var};

/// Everything needed to rebuild a model's shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_labels: usize,
    /// One entry per stream, in stream order.
    pub geometry: Vec<PatchGeometry>,
    pub widths: TopologyWidths,
    pub fusion_hidden: usize,
    pub iterations: usize,
    pub si: SiOptions,
}

impl ModelConfig {
    pub fn new(num_labels: usize, geometry: Vec<PatchGeometry>) -> Self {
        Self {
            num_labels,
            geometry,
            widths: TopologyWidths::default(),
            fusion_hidden: DEFAULT_FUSION_HIDDEN,
            iterations: DEFAULT_ITERATIONS,
            si: SiOptions::default(),
        }
    }

    pub fn for_dataset(dataset: &Dataset) -> Self {
        Self::new(dataset.num_labels(), dataset.geometry().to_vec())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("unreadable model config: {e}")))
    }

    /// Checks that `dataset` can be fed to this model.
    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        if dataset.num_labels() != self.num_labels {
            return Err(Error::Config(format!(
                "model expects N={} labels, dataset has N={}",
                self.num_labels,
                dataset.num_labels()
            )));
        }
        if dataset.geometry() != self.geometry.as_slice() {
            return Err(Error::Config(format!(
                "model expects stream geometry {:?}, dataset has {:?}",
                self.geometry,
                dataset.geometry()
            )));
        }
        Ok(())
    }
}

/// All learnable state: the streams, the fusion units and the structure units.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub streams: Vec<PatchNet>,
    pub fusion: FusionParams,
    pub structure: SiuParams,
}

/// Which blocks receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Trainable {
    pub conv: bool,
    pub patch_fc: bool,
    pub fusion: bool,
    pub structure: bool,
}

impl Trainable {
    pub fn patch(&self) -> bool {
        self.conv || self.patch_fc
    }
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub streams: Vec<PatchNetVars>,
    pub fusion: Vec<[Var; 4]>,
    pub structure: SiuVars,
}

impl ModelVars {
    /// Same order as [`ModelParams::named_params`].
    pub fn all(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.streams.iter().flat_map(PatchNetVars::all).collect();
        out.extend(self.fusion.iter().flatten());
        out.extend(self.structure.all());
        out
    }
}

/// Outputs of every head for one batch, each `[B×N]`.
#[derive(Debug, Clone)]
pub struct Heads {
    pub streams: Vec<Var>,
    pub fused: Var,
    pub structure: Var,
    pub trace: Vec<SiStepVars>,
}

impl ModelParams {
    /// Uniform `[-0.05, 0.05]` initialization of every block from one seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let streams = config
            .geometry
            .iter()
            .map(|g| Ok(PatchNet::init(build_topology(*g, config.num_labels, &config.widths)?, &mut rng, INIT_SCALE)))
            .collect::<Result<Vec<_>>>()?;
        let fusion = FusionParams::init(config.num_labels, streams.len(), config.fusion_hidden, &mut rng, INIT_SCALE);
        let structure = SiuParams::init(config.num_labels, &mut rng, INIT_SCALE);
        let mut model = Self {
            config,
            streams,
            fusion,
            structure,
        };
        model.set_trainable(Trainable::default());
        Ok(model)
    }

    pub fn num_labels(&self) -> usize {
        self.config.num_labels
    }

    pub fn num_streams(&self) -> usize {
        self.streams.len()
    }

    pub fn set_trainable(&mut self, t: Trainable) {
        for s in &mut self.streams {
            s.set_trainable(t.conv, t.patch_fc);
        }
        self.fusion.set_trainable(t.fusion);
        self.structure.set_trainable(t.structure);
    }

    /// Every learnable tensor with a stable, unique name.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.streams.iter().enumerate() {
            out.extend(s.named_params().into_iter().map(|(n, t)| (format!("stream{i}.{n}"), t)));
        }
        out.extend(self.fusion.named_params().into_iter().map(|(n, t)| (format!("fusion.{n}"), t)));
        out.extend(self.structure.named_params().into_iter().map(|(n, t)| (format!("structure.{n}"), t)));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.streams.iter_mut().flat_map(PatchNet::params_mut).collect();
        out.extend(self.fusion.params_mut());
        out.extend(self.structure.params_mut());
        out
    }

    /// Batch-norm running statistics, named like the parameters.
    pub fn named_bn_states(&self) -> Vec<(String, &BatchNormState)> {
        self.streams
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.blocks.iter().enumerate().map(move |(k, b)| (format!("stream{i}.conv{k}.bn"), &b.bn)))
            .collect()
    }

    pub fn bn_states_mut(&mut self) -> Vec<&mut BatchNormState> {
        self.streams
            .iter_mut()
            .flat_map(|s| s.blocks.iter_mut().map(|b| &mut b.bn))
            .collect()
    }

    pub fn bn_ready(&self) -> bool {
        self.named_bn_states().iter().all(|(_, s)| s.is_initialized())
    }

    pub fn num_parameters(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            streams: self.streams.iter().map(|s| s.bind(tape)).collect(),
            fusion: self.fusion.bind(tape),
            structure: self.structure.bind(tape),
        }
    }

    /// Runs one stream on `input[B×H×W×C]`.
    pub fn forward_stream(
        &mut self,
        tape: &mut Tape,
        vars: &ModelVars,
        stream: usize,
        input: Var,
        mode: BatchNormMode,
    ) -> Result<Var> {
        let net = self.streams.get_mut(stream).ok_or(Error::Index {
            what: "stream",
            index: stream,
            len: vars.streams.len(),
        })?;
        net.forward(tape, &vars.streams[stream], input, mode)
    }

    /// Fusion and structure heads on top of already computed stream outputs.
    pub fn forward_heads(&self, tape: &mut Tape, vars: &ModelVars, streams: Vec<Var>) -> Result<Heads> {
        let fused = self.fusion.forward(tape, &vars.fusion, &streams)?;
        let (structure, trace) = self.forward_structure(tape, vars, fused)?;
        Ok(Heads {
            streams,
            fused,
            structure,
            trace,
        })
    }

    pub fn forward_structure(&self, tape: &mut Tape, vars: &ModelVars, fused: Var) -> Result<(Var, Vec<SiStepVars>)> {
        si_unroll_tape(tape, &vars.structure, fused, self.config.iterations, self.config.si)
    }

    /// Full forward of raw per-stream inputs.
    pub fn forward(&mut self, tape: &mut Tape, vars: &ModelVars, inputs: &[Var], mode: BatchNormMode) -> Result<Heads> {
        if inputs.len() != self.num_streams() {
            return Err(Error::dim(
                "model_forward",
                format!("{} inputs for {} streams", inputs.len(), self.num_streams()),
            ));
        }
        let streams = inputs
            .iter()
            .enumerate()
            .map(|(i, &x)| self.forward_stream(tape, vars, i, x, mode))
            .collect::<Result<Vec<_>>>()?;
        self.forward_heads(tape, vars, streams)
    }
}

/// `[B×H×W×C]` input for stream `stream` from the given samples.
pub fn stream_batch(dataset: &Dataset, indices: &[usize], stream: usize) -> Result<Tensor> {
    let images: Vec<&Tensor> = indices
        .iter()
        .map(|&i| &dataset.samples()[i].patches[stream])
        .collect();
    batch_images(&images)
}

/// Inference-mode outputs of every head over a whole dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    /// `[stream][sample][label]`.
    pub streams: Vec<Vec<Vec<f64>>>,
    pub fused: Vec<Vec<f64>>,
    pub structure: Vec<Vec<f64>>,
    /// Per iteration: mean messages, correction factors and predictions over samples, `[t][label]`.
    pub trace: Vec<TraceStep>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub messages: Vec<f64>,
    pub chi: Vec<f64>,
    pub predictions: Vec<f64>,
}

impl Predictions {
    /// Mean correction factor over all iterations, samples and labels.
    pub fn mean_chi(&self) -> f64 {
        let all: Vec<f64> = self.trace.iter().flat_map(|s| s.chi.iter().copied()).collect();
        if all.is_empty() {
            return f64::NAN;
        }
        all.iter().sum::<f64>() / all.len() as f64
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let n = t.shape()[1];
    t.values().chunks(n).map(<[f64]>::to_vec).collect()
}

fn column_sums(t: &Tensor, acc: &mut [f64]) {
    let n = acc.len();
    for row in t.values().chunks(n) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}

/// Evaluates all heads in inference mode, `batch` samples at a time.
pub fn predict(model: &mut ModelParams, dataset: &Dataset, batch: usize) -> Result<Predictions> {
    model.config.check_dataset(dataset)?;
    if !model.bn_ready() {
        return Err(Error::State("batch-norm statistics are uninitialized; train the patch streams first".into()));
    }
    let n = model.num_labels();
    let steps = model.config.iterations;
    let mut out = Predictions {
        streams: vec![Vec::with_capacity(dataset.len()); model.num_streams()],
        fused: Vec::with_capacity(dataset.len()),
        structure: Vec::with_capacity(dataset.len()),
        trace: Vec::new(),
    };
    let mut sums = vec![[vec![0.0; n], vec![0.0; n], vec![0.0; n]]; steps];
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(batch.max(1)) {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let inputs = (0..model.num_streams())
            .map(|s| Ok(tape.constant(stream_batch(dataset, chunk, s)?)))
            .collect::<Result<Vec<_>>>()?;
        let heads = model.forward(&mut tape, &vars, &inputs, BatchNormMode::Infer)?;
        for (dst, v) in out.streams.iter_mut().zip(&heads.streams) {
            dst.extend(rows(tape.value(*v)));
        }
        out.fused.extend(rows(tape.value(heads.fused)));
        out.structure.extend(rows(tape.value(heads.structure)));
        for (acc, step) in sums.iter_mut().zip(&heads.trace) {
            column_sums(tape.value(step.messages), &mut acc[0]);
            column_sums(tape.value(step.chi), &mut acc[1]);
            column_sums(tape.value(step.predictions), &mut acc[2]);
        }
    }
    let m = dataset.len().max(1) as f64;
    out.trace = sums
        .into_iter()
        .map(|[a, b, c]| {
            let avg = |v: Vec<f64>| v.into_iter().map(|x| x / m).collect();
            TraceStep {
                messages: avg(a),
                chi: avg(b),
                predictions: avg(c),
            }
        })
        .collect();
    Ok(out)
}
