//! Staged optimization of the assembled model.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{compute_class_stats, Balancing, ClassStats, Dataset};
use crate::error::{Error, Result};
use crate::fusion::bce_loss;
use crate::model::{stream_batch, Heads, ModelParams, ModelVars, Trainable};
use crate::patch::{label_tensor, weighted_l2_loss};
use crate::structure::{chi_regularizer_tape, DEFAULT_CHI_PENALTY};
use crate::tensor::{BatchNormMode, Tape, Tensor, Var};

// ---- optimizer -------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for a fixed, ordered list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[&[usize]]) -> Self {
        let zeros = || shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn for_model(config: AdamConfig, model: &ModelParams) -> Self {
        let params = model.named_params();
        let shapes: Vec<&[usize]> = params.iter().map(|(_, t)| t.shape()).collect();
        Self::new(config, &shapes)
    }
}

/// One bias-corrected Adam update from the gradients stored on each tensor.
///
/// Tensors that do not require gradients are left untouched. All gradients are
/// checked before anything is modified, so a failure leaves every tensor as it was.
pub fn adam_step(params: &mut [(String, &mut Tensor)], state: &mut AdamState) -> Result<()> {
    if params.len() != state.first.len() {
        return Err(Error::dim(
            "adam_step",
            format!("{} parameters, optimizer tracks {}", params.len(), state.first.len()),
        ));
    }
    for ((name, t), m) in params.iter().zip(&state.first) {
        if t.shape() != m.shape() {
            return Err(Error::dim("adam_step", format!("{name}: {:?} vs moments {:?}", t.shape(), m.shape())));
        }
        if let Some(g) = t.grad().filter(|_| t.requires_grad()) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in {name}")));
            }
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for (((name, t), m), v) in params.iter_mut().zip(&mut state.first).zip(&mut state.second) {
        if !t.requires_grad() {
            continue;
        }
        let Some(g) = t.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        let (m, v) = (m.values_mut(), v.values_mut());
        for (k, w) in t.values_mut().iter_mut().enumerate() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
            *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
        }
        if !t.is_finite() {
            return Err(Error::Numeric(format!("{name} became non-finite after an update")));
        }
        t.zero_grad();
    }
    Ok(())
}

// ---- losses ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub patch: f64,
    pub fusion: f64,
    pub structure: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            patch: 0.25,
            fusion: 0.25,
            structure: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.patch, self.fusion, self.structure].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be ≥ 0, got {self:?}")));
        }
        Ok(())
    }
}

/// `w1·patch + w2·fusion + w3·(structure + chi_penalty)`.
pub fn compound_loss(patch: f64, fusion: f64, structure: f64, chi_penalty: f64, w: LossWeights) -> f64 {
    w.patch * patch + w.fusion * fusion + w.structure * (structure + chi_penalty)
}

/// Per-head losses recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct HeadLosses {
    /// Weighted L2, averaged over streams.
    pub patch: Var,
    pub fusion: Var,
    pub structure: Var,
    pub chi_penalty: Var,
}

pub fn head_losses(tape: &mut Tape, heads: &Heads, labels: &Tensor, stats: &ClassStats, r: f64) -> Result<HeadLosses> {
    let patch = mean_patch_loss(tape, &heads.streams, labels, stats)?;
    let fusion = bce_loss(tape, heads.fused, labels)?;
    let structure = bce_loss(tape, heads.structure, labels)?;
    let chi_penalty = chi_regularizer_tape(tape, &heads.trace, r)?;
    Ok(HeadLosses {
        patch,
        fusion,
        structure,
        chi_penalty,
    })
}

fn mean_patch_loss(tape: &mut Tape, streams: &[Var], labels: &Tensor, stats: &ClassStats) -> Result<Var> {
    let losses = streams
        .iter()
        .map(|&p| weighted_l2_loss(tape, p, labels, stats))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.stack(&losses, 0)?;
    tape.mean_all(stacked)
}

pub fn compound_loss_tape(tape: &mut Tape, l: &HeadLosses, w: LossWeights) -> Result<Var> {
    let a = tape.scale(l.patch, w.patch);
    let b = tape.scale(l.fusion, w.fusion);
    let si = tape.add(l.structure, l.chi_penalty)?;
    let c = tape.scale(si, w.structure);
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

// ---- early stopping ---------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once the monitored loss has not improved by more than `min_delta`
/// for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best - self.min_delta || (self.best_epoch.is_none() && loss.is_finite()) {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

/// Replays a loss history; true when training should stop after its last entry.
pub fn early_stopper(history: &[f64], patience: usize, min_delta: f64) -> bool {
    let mut s = EarlyStopper::new(patience, min_delta);
    history
        .iter()
        .enumerate()
        .map(|(e, &l)| s.observe(e + 1, l))
        .last()
        == Some(StopDecision::Stop)
}

// ---- staged training --------------------------------------------------------

/// The five optimization steps after initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    /// Each stream alone on its weighted L2 loss.
    Patch = 1,
    /// Fusion units with the streams frozen.
    Fusion = 2,
    /// Streams and fusion jointly.
    PatchFusion = 3,
    /// Structure units with everything else frozen.
    Structure = 4,
    /// Everything on the compound loss.
    Joint = 5,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Patch, Stage::Fusion, Stage::PatchFusion, Stage::Structure, Stage::Joint];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.id() == id)
            .ok_or_else(|| Error::Config(format!("unknown stage {id}; stages are 1..=5")))
    }

    fn trainable(self, freeze_conv: bool) -> Trainable {
        let patch = matches!(self, Stage::Patch | Stage::PatchFusion | Stage::Joint);
        Trainable {
            conv: patch && !freeze_conv,
            patch_fc: patch,
            fusion: matches!(self, Stage::Fusion | Stage::PatchFusion | Stage::Joint),
            structure: matches!(self, Stage::Structure | Stage::Joint),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.id())
    }
}

/// Parses a comma-separated stage list such as `1,2,3`.
pub fn parse_stages(s: &str) -> Result<Vec<Stage>> {
    let stages = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<u8>()
                .map_err(|_| Error::Config(format!("bad stage {t:?}")))
                .and_then(Stage::from_id)
        })
        .collect::<Result<Vec<_>>>()?;
    if stages.is_empty() {
        return Err(Error::Config("no stages requested".into()));
    }
    Ok(stages)
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let id = s.trim().parse::<u8>().map_err(|_| Error::Config(format!("bad stage {s:?}")))?;
        Self::from_id(id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stages: Vec<Stage>,
    pub weights: LossWeights,
    /// Correction-factor penalty weight.
    pub chi_penalty: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Per-stage replacement for `max_epochs`, indexed by stage id − 1.
    pub stage_max_epochs: [Option<usize>; 5],
    pub patience: usize,
    /// Per-stage replacement for `patience`, indexed by stage id − 1.
    pub stage_patience: [Option<usize>; 5],
    pub min_delta: f64,
    pub seed: u64,
    pub balancing: Balancing,
    /// Keep conv filters and batch-norm affine parameters fixed.
    pub freeze_conv: bool,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stages: Stage::ALL.to_vec(),
            weights: LossWeights::default(),
            chi_penalty: DEFAULT_CHI_PENALTY,
            adam: AdamConfig::default(),
            batch_size: 64,
            max_epochs: 200,
            stage_max_epochs: [None; 5],
            stage_patience: [None; 5],
            patience: 10,
            min_delta: 1e-5,
            seed: 0,
            balancing: Balancing::On,
            freeze_conv: false,
            verbose: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.stages.is_empty() {
            return Err(Error::Config("no stages requested".into()));
        }
        if !(self.chi_penalty >= 0.0) {
            return Err(Error::Config(format!("r must be ≥ 0, got {}", self.chi_penalty)));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.adam.lr)));
        }
        if self.stage_max_epochs.contains(&Some(0)) || self.stage_patience.contains(&Some(0)) {
            return Err(Error::Config("per-stage max epochs and patience must be positive".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch size, max epochs and patience must be positive".into()));
        }
        Ok(())
    }

    pub fn max_epochs_for(&self, stage: Stage) -> usize {
        self.stage_max_epochs[stage.id() as usize - 1].unwrap_or(self.max_epochs)
    }

    pub fn patience_for(&self, stage: Stage) -> usize {
        self.stage_patience[stage.id() as usize - 1].unwrap_or(self.patience)
    }
}

/// One row of a stage's history. Epoch 0 is the evaluation before any update.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub stage: Stage,
    /// Set for per-stream records of the patch stage.
    pub stream: Option<usize>,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Validation head losses; NaN where a head is not evaluated.
    pub val_patch: f64,
    pub val_fusion: f64,
    pub val_structure: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn stage(&self, stage: Stage) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.stage == stage)
    }

    /// Tab-separated table of one stage's records.
    pub fn write_tsv<W: Write>(&self, stage: Stage, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "stage\tstream\tepoch\ttrain_loss\tval_loss\tval_patch\tval_fusion\tval_structure")?;
        for r in self.stage(stage) {
            let stream = r.stream.map_or("-".to_string(), |s| s.to_string());
            writeln!(
                out,
                "{}\t{stream}\t{}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.10e}",
                r.stage, r.epoch, r.train_loss, r.val_loss, r.val_patch, r.val_fusion, r.val_structure
            )?;
        }
        Ok(())
    }

    /// Writes `history_stage{k}.tsv` for every stage present.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for stage in Stage::ALL {
            if self.stage(stage).next().is_none() {
                continue;
            }
            let path = dir.join(format!("history_stage{stage}.tsv"));
            let mut buf = Vec::new();
            self.write_tsv(stage, &mut buf).expect("in-memory write");
            std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Result of [`staged_train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: TrainHistory,
    /// Optimizer state of the last stage, taken at its restored best epoch.
    pub optimizer: Option<AdamState>,
}

/// Labels of the chosen samples as a `[B×N]` tensor.
fn batch_labels(dataset: &Dataset, indices: &[usize]) -> Result<Tensor> {
    let rows: Vec<&[u8]> = indices.iter().map(|&i| dataset.samples()[i].labels.as_slice()).collect();
    label_tensor(&rows)
}

fn rows_of(t: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let n = t.shape()[1];
    let mut v = Vec::with_capacity(indices.len() * n);
    for &i in indices {
        v.extend_from_slice(&t.values()[i * n..(i + 1) * n]);
    }
    Tensor::new([indices.len(), n], v)
}

/// Loss values of one evaluation pass.
#[derive(Debug, Clone, Copy)]
struct Eval {
    loss: f64,
    patch: f64,
    fusion: f64,
    structure: f64,
}

fn stream_mode(model: &ModelParams, stream: usize) -> BatchNormMode {
    if model.streams[stream].bn_ready() {
        BatchNormMode::Infer
    } else {
        BatchNormMode::Train
    }
}

/// Frozen-stream outputs `[M×N]` per stream, inference mode.
fn cache_streams(model: &mut ModelParams, data: &Dataset, batch: usize) -> Result<Vec<Tensor>> {
    let n = model.num_labels();
    let mut out = vec![Vec::with_capacity(data.len() * n); model.num_streams()];
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch) {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        for (s, dst) in out.iter_mut().enumerate() {
            let x = tape.constant(stream_batch(data, chunk, s)?);
            let p = model.forward_stream(&mut tape, &vars, s, x, BatchNormMode::Infer)?;
            dst.extend_from_slice(tape.value(p).values());
        }
    }
    out.into_iter().map(|v| Tensor::new([data.len(), n], v)).collect()
}

/// Fused outputs `[M×N]` from cached stream outputs.
fn cache_fused(model: &ModelParams, streams: &[Tensor]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let sv: Vec<Var> = streams.iter().map(|t| tape.constant(t.clone())).collect();
    let f = model.fusion.forward(&mut tape, &vars.fusion, &sv)?;
    Ok(tape.value(f).clone())
}

/// Precomputed inputs for the stages that keep the streams frozen.
struct Cache {
    streams: Vec<Tensor>,
    fused: Option<Tensor>,
}

struct StageRunner<'a> {
    cfg: &'a TrainConfig,
    train: &'a Dataset,
    val: &'a Dataset,
    stats: ClassStats,
    history: TrainHistory,
    optimizer: Option<AdamState>,
}

impl StageRunner<'_> {
    /// Records the forward graph and loss for one batch of `data`.
    fn forward_loss(
        &self,
        model: &mut ModelParams,
        tape: &mut Tape,
        stage: Stage,
        stream: Option<usize>,
        data: &Dataset,
        cache: Option<&Cache>,
        idx: &[usize],
        updating: bool,
    ) -> Result<(ModelVars, Var, [Option<Var>; 3])> {
        let vars = model.bind(tape);
        let labels = batch_labels(data, idx)?;
        let mode = |m: &ModelParams, s: usize| if updating { BatchNormMode::Train } else { stream_mode(m, s) };
        let w = self.cfg.weights;
        let r = self.cfg.chi_penalty;
        match stage {
            Stage::Patch => {
                let s = stream.expect("patch stage runs per stream");
                let x = tape.constant(stream_batch(data, idx, s)?);
                let md = mode(model, s);
                let p = model.forward_stream(tape, &vars, s, x, md)?;
                let l = weighted_l2_loss(tape, p, &labels, &self.stats)?;
                Ok((vars, l, [Some(l), None, None]))
            }
            Stage::Fusion => {
                let cache = cache.expect("fusion stage uses cached streams");
                let sv = cache
                    .streams
                    .iter()
                    .map(|t| Ok(tape.constant(rows_of(t, idx)?)))
                    .collect::<Result<Vec<_>>>()?;
                let f = model.fusion.forward(tape, &vars.fusion, &sv)?;
                let l = bce_loss(tape, f, &labels)?;
                Ok((vars, l, [None, Some(l), None]))
            }
            Stage::Structure => {
                let cache = cache.expect("structure stage uses cached fusion");
                let f = tape.constant(rows_of(cache.fused.as_ref().expect("fused cache"), idx)?);
                let (y, trace) = model.forward_structure(tape, &vars, f)?;
                let l = bce_loss(tape, y, &labels)?;
                let reg = chi_regularizer_tape(tape, &trace, r)?;
                let total = tape.add(l, reg)?;
                Ok((vars, total, [None, None, Some(l)]))
            }
            Stage::PatchFusion | Stage::Joint => {
                let streams = (0..model.num_streams())
                    .map(|s| {
                        let x = tape.constant(stream_batch(data, idx, s)?);
                        let md = mode(model, s);
                        model.forward_stream(tape, &vars, s, x, md)
                    })
                    .collect::<Result<Vec<_>>>()?;
                if stage == Stage::PatchFusion {
                    let lp = mean_patch_loss(tape, &streams, &labels, &self.stats)?;
                    let f = model.fusion.forward(tape, &vars.fusion, &streams)?;
                    let lf = bce_loss(tape, f, &labels)?;
                    let total = tape.add(lp, lf)?;
                    Ok((vars, total, [Some(lp), Some(lf), None]))
                } else {
                    let heads = model.forward_heads(tape, &vars, streams)?;
                    let hl = head_losses(tape, &heads, &labels, &self.stats, r)?;
                    let total = compound_loss_tape(tape, &hl, w)?;
                    Ok((vars, total, [Some(hl.patch), Some(hl.fusion), Some(hl.structure)]))
                }
            }
        }
    }

    fn evaluate(
        &self,
        model: &ModelParams,
        stage: Stage,
        stream: Option<usize>,
        data: &Dataset,
        cache: Option<&Cache>,
    ) -> Result<Eval> {
        // a scratch copy so that unseeded batch-norm statistics stay untouched
        let mut scratch = model.clone();
        let idx: Vec<usize> = (0..data.len()).collect();
        let (mut sum, mut parts, mut weight) = (0.0, [0.0; 3], 0.0);
        let mut seen = [false; 3];
        for chunk in idx.chunks(self.cfg.batch_size) {
            let mut tape = Tape::new();
            let (_, loss, heads) = self.forward_loss(&mut scratch, &mut tape, stage, stream, data, cache, chunk, false)?;
            let b = chunk.len() as f64;
            sum += b * tape.value(loss).values()[0];
            for (k, h) in heads.iter().enumerate() {
                if let Some(v) = h {
                    parts[k] += b * tape.value(*v).values()[0];
                    seen[k] = true;
                }
            }
            weight += b;
        }
        let avg = |k: usize| if seen[k] { parts[k] / weight } else { f64::NAN };
        Ok(Eval {
            loss: sum / weight,
            patch: avg(0),
            fusion: avg(1),
            structure: avg(2),
        })
    }

    fn run(
        &mut self,
        model: &mut ModelParams,
        stage: Stage,
        stream: Option<usize>,
        train_cache: Option<&Cache>,
        val_cache: Option<&Cache>,
    ) -> Result<()> {
        let mut adam = AdamState::for_model(self.cfg.adam, model);
        let mut stopper = EarlyStopper::new(self.cfg.patience_for(stage), self.cfg.min_delta);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(stage.id() as u64 * 1024 + stream.map_or(0, |s| s as u64 + 1));
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();

        let push = |h: &mut TrainHistory, epoch: usize, train_loss: f64, v: Eval| {
            h.records.push(EpochRecord {
                stage,
                stream,
                epoch,
                train_loss,
                val_loss: v.loss,
                val_patch: v.patch,
                val_fusion: v.fusion,
                val_structure: v.structure,
            })
        };
        let initial_train = self.evaluate(model, stage, stream, self.train, train_cache)?;
        let initial_val = self.evaluate(model, stage, stream, self.val, val_cache)?;
        push(&mut self.history, 0, initial_train.loss, initial_val);
        // unseeded batch-norm statistics make the untrained model unusable as a fallback
        if model.bn_ready() {
            stopper.observe(0, initial_val.loss);
        }
        let mut best = (model.clone(), adam.clone());

        let mut order: Vec<usize> = (0..self.train.len()).collect();
        for epoch in 1..=self.cfg.max_epochs_for(stage) {
            order.shuffle(&mut rng);
            let (mut sum, mut count) = (0.0, 0.0);
            for chunk in order.chunks(self.cfg.batch_size) {
                let mut tape = Tape::new();
                let (vars, loss, _) =
                    self.forward_loss(model, &mut tape, stage, stream, self.train, train_cache, chunk, true)?;
                let value = tape.value(loss).values()[0];
                if !value.is_finite() {
                    return Err(Error::Numeric(format!("stage {stage}: non-finite training loss at epoch {epoch}")));
                }
                let grads = tape.backward(loss)?;
                for (v, t) in vars.all().into_iter().zip(model.params_mut()) {
                    if t.requires_grad() {
                        grads.accumulate_into(v, t)?;
                    }
                }
                let mut named: Vec<(String, &mut Tensor)> = names.iter().cloned().zip(model.params_mut()).collect();
                adam_step(&mut named, &mut adam)?;
                sum += value * chunk.len() as f64;
                count += chunk.len() as f64;
            }
            let v = self.evaluate(model, stage, stream, self.val, val_cache)?;
            push(&mut self.history, epoch, sum / count, v);
            let decision = stopper.observe(epoch, v.loss);
            if self.cfg.verbose {
                let s = stream.map_or(String::new(), |s| format!(" stream {s}"));
                eprintln!(
                    "stage {stage}{s} epoch {epoch}: train {:.5} val {:.5}{}",
                    sum / count,
                    v.loss,
                    if decision == StopDecision::Improved { " *" } else { "" }
                );
            }
            match decision {
                StopDecision::Improved => best = (model.clone(), adam.clone()),
                StopDecision::Continue => {}
                StopDecision::Stop => break,
            }
        }
        *model = best.0;
        self.optimizer = Some(best.1);
        Ok(())
    }
}

/// Runs the requested stages in order on an initialized model.
///
/// Each stage trains only its own blocks with a fresh optimizer, stops early on
/// the validation loss of its objective and restores the best epoch. The hook
/// sees the model after every stage.
pub fn staged_train(
    model: &mut ModelParams,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mut after_stage: impl FnMut(Stage, &ModelParams),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.config.check_dataset(train)?;
    model.config.check_dataset(val)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation sets must both be non-empty".into()));
    }
    let stats = compute_class_stats(train, cfg.balancing)?;
    let mut runner = StageRunner {
        cfg,
        train,
        val,
        stats,
        history: TrainHistory::default(),
        optimizer: None,
    };
    for &stage in &cfg.stages {
        model.set_trainable(stage.trainable(cfg.freeze_conv));
        match stage {
            Stage::Patch => {
                for s in 0..model.num_streams() {
                    runner.run(model, stage, Some(s), None, None)?;
                }
            }
            Stage::Fusion | Stage::Structure => {
                if !model.bn_ready() {
                    return Err(Error::Config(format!(
                        "stage {stage} needs trained patch streams; run stage 1 or 3 first"
                    )));
                }
                let mut caches = Vec::with_capacity(2);
                for data in [train, val] {
                    let streams = cache_streams(model, data, cfg.batch_size)?;
                    let fused = (stage == Stage::Structure)
                        .then(|| cache_fused(model, &streams))
                        .transpose()?;
                    caches.push(Cache { streams, fused });
                }
                runner.run(model, stage, None, Some(&caches[0]), Some(&caches[1]))?;
            }
            Stage::PatchFusion | Stage::Joint => runner.run(model, stage, None, None, None)?,
        }
        model.set_trainable(Trainable::default());
        after_stage(stage, model);
    }
    Ok(TrainOutcome {
        history: runner.history,
        optimizer: runner.optimizer,
    })
}
