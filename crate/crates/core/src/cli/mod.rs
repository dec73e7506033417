//! The `dsin` command-line tool.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O error, 1 anything else.

mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub use config::{parse_config_text, Command, RunConfig, OUTPUT_ROOT_ENV, RESOLVED_CONFIG};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{generate_synthetic_dataset, load_manifest, make_folds, save_manifest, Balancing, CropSpec, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{au_correlation_matrix, default_grid, f1_frame, label_stats, tune_thresholds};
use crate::model::{predict, ModelConfig, ModelParams, Predictions};
use crate::patch::TopologyWidths;
use crate::report::{read_table, render_heatmap, render_tau_sweep, save_png, tau_sweep, write_run_report, HeadReport, RunReport, TauSweep};
use crate::structure::SiOptions;
use crate::train::{parse_stages, staged_train, AdamConfig, LossWeights, Stage, TrainConfig};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;

/// Checkpoint file written by `train` in each run directory.
pub const CHECKPOINT_FILE: &str = "model.ckpt";

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } | Error::Manifest { .. } | Error::Checkpoint(_) => EXIT_IO,
        Error::Config(_) | Error::Generation(_) | Error::Dataset(_) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "dsin", version, about = "Deep structure inference for correlated multi-label prediction")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Generate a synthetic dataset manifest.
    Synth(CommonArgs),
    /// Run staged training on a dataset fold.
    Train(CommonArgs),
    /// Score a checkpoint on a dataset split.
    Eval(CommonArgs),
    /// Write per-sample predictions of every head.
    Predict(CommonArgs),
    /// Render plot data written by `eval` to PNG images.
    Report(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Structure inference iterations.
    #[arg(long = "T")]
    iterations: Option<usize>,
    /// Correction-factor penalty.
    #[arg(long = "r")]
    chi_penalty: Option<f64>,
    /// Comma-separated stage ids, e.g. `1,2,3`.
    #[arg(long)]
    stages: Option<String>,
    #[arg(long)]
    no_balancing: bool,
    #[arg(long)]
    no_correction_factors: bool,
    #[arg(long)]
    tune_thresholds: bool,
    #[arg(long)]
    freeze_conv: bool,
}

impl CommonArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
            out.push((k.trim().to_owned(), v.trim().to_owned()));
        }
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_owned(), v));
            }
        };
        put("seed", self.seed.map(|v| v.to_string()));
        put("output", self.output.as_ref().map(|p| p.display().to_string()));
        put("data", self.data.as_ref().map(|p| p.display().to_string()));
        put("checkpoint", self.checkpoint.as_ref().map(|p| p.display().to_string()));
        put("T", self.iterations.map(|v| v.to_string()));
        put("r", self.chi_penalty.map(|v| v.to_string()));
        put("stages", self.stages.clone());
        let on = |b: bool, v: &str| b.then(|| v.to_owned());
        put("balancing", on(self.no_balancing, "false"));
        put("correction_factors", on(self.no_correction_factors, "false"));
        put("tune_thresholds", on(self.tune_thresholds, "true"));
        put("freeze_conv", on(self.freeze_conv, "true"));
        Ok(out)
    }

    fn resolve(&self, command: Command) -> Result<RunConfig> {
        let file = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                parse_config_text(&text, &path.display().to_string())?
            }
            None => Vec::new(),
        };
        RunConfig::resolve(command, file, self.overrides()?)
    }
}

/// Parses `args` (including the program name), runs the command and maps the outcome to an exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let (command, args) = match &cli.command {
        Sub::Synth(a) => (Command::Synth, a),
        Sub::Train(a) => (Command::Train, a),
        Sub::Eval(a) => (Command::Eval, a),
        Sub::Predict(a) => (Command::Predict, a),
        Sub::Report(a) => (Command::Report, a),
    };
    match args.resolve(command).and_then(|cfg| execute(&cfg)) {
        Ok(dir) => {
            println!("{command}: wrote {}", dir.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("dsin {command}: {e}");
            exit_code(&e)
        }
    }
}

pub fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}

/// Runs a resolved configuration; returns the output directory.
pub fn execute(cfg: &RunConfig) -> Result<PathBuf> {
    match cfg.command {
        Command::Synth => cmd_synth(cfg),
        Command::Train => cmd_train(cfg),
        Command::Eval => cmd_eval(cfg),
        Command::Predict => cmd_predict(cfg),
        Command::Report => cmd_report(cfg),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn synthetic_spec(cfg: &RunConfig) -> Result<SyntheticSpec> {
    let n: usize = cfg.get("labels")?;
    if n == 0 {
        return Err(Error::Config("key `labels` must be positive".into()));
    }
    let ratios: Vec<f64> = cfg.list("ratios")?;
    let mut spec = SyntheticSpec::independent(n, 0.5);
    spec.positive_ratios = match ratios.len() {
        1 => vec![ratios[0]; n],
        k if k == n => ratios,
        k => return Err(Error::Config(format!("key `ratios`: {k} values for {n} labels"))),
    };
    let bg: f64 = cfg.get("background_correlation")?;
    for i in 0..n {
        for j in i + 1..n {
            spec.set_correlation(i, j, bg);
        }
    }
    for item in cfg.list::<String>("correlations")? {
        let bad = || Error::Config(format!("key `correlations`: expected `i-j:rho`, got {item:?}"));
        let (pair, rho) = item.split_once(':').ok_or_else(bad)?;
        let (i, j) = pair.split_once('-').ok_or_else(bad)?;
        let (i, j): (usize, usize) = (i.trim().parse().map_err(|_| bad())?, j.trim().parse().map_err(|_| bad())?);
        let rho: f64 = rho.trim().parse().map_err(|_| bad())?;
        if i >= n || j >= n || i == j {
            return Err(Error::Config(format!("key `correlations`: pair {i}-{j} is not an off-diagonal pair of {n} labels")));
        }
        spec.set_correlation(i, j, rho);
    }
    spec.glyph_noise = cfg.get("glyph_noise")?;
    spec.appearance_jitter = cfg.get("appearance_jitter")?;
    spec.glyph_dropout = cfg.get("glyph_dropout")?;
    spec.subjects = cfg.get("subjects")?;
    spec.samples_per_subject = cfg.get("samples_per_subject")?;
    spec.crop = CropSpec::five_point(cfg.get("face_size")?, cfg.get("patch_size")?);
    spec.include_face = cfg.flag("include_face")?;
    spec.burn_in = cfg.get("burn_in")?;
    spec.seed = cfg.get("seed")?;
    spec.validate()?;
    Ok(spec)
}

fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    let spec = synthetic_spec(cfg)?;
    let dataset = generate_synthetic_dataset(&spec)?;
    let dir = cfg.output_dir();
    create_dir(&dir)?;
    save_manifest(&dataset, &dir)?;
    cfg.persist(&dir)?;
    Ok(dir)
}

/// `k:v` pairs keyed by stage id.
fn stage_overrides(cfg: &RunConfig, key: &str) -> Result<[Option<usize>; 5]> {
    let mut out = [None; 5];
    for item in cfg.list::<String>(key)? {
        let bad = || Error::Config(format!("key `{key}`: expected `stage:count`, got {item:?}"));
        let (s, v) = item.split_once(':').ok_or_else(bad)?;
        let stage = Stage::from_id(s.trim().parse().map_err(|_| bad())?)?;
        out[stage.id() as usize - 1] = Some(v.trim().parse().map_err(|_| bad())?);
    }
    Ok(out)
}

pub fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    let tc = TrainConfig {
        stages: parse_stages(cfg.raw("stages"))?,
        weights: LossWeights {
            patch: cfg.get("w_patch")?,
            fusion: cfg.get("w_fusion")?,
            structure: cfg.get("w_structure")?,
        },
        chi_penalty: cfg.get("r")?,
        adam: AdamConfig {
            lr: cfg.get("lr")?,
            ..AdamConfig::default()
        },
        batch_size: cfg.get("batch_size")?,
        max_epochs: cfg.get("max_epochs")?,
        stage_max_epochs: stage_overrides(cfg, "stage_max_epochs")?,
        patience: cfg.get("patience")?,
        stage_patience: stage_overrides(cfg, "stage_patience")?,
        min_delta: cfg.get("min_delta")?,
        seed: cfg.get("seed")?,
        balancing: if cfg.flag("balancing")? { Balancing::On } else { Balancing::Off },
        freeze_conv: cfg.flag("freeze_conv")?,
        verbose: cfg.flag("verbose")?,
    };
    tc.validate()?;
    Ok(tc)
}

pub fn model_config(cfg: &RunConfig, dataset: &Dataset) -> Result<ModelConfig> {
    let mut mc = ModelConfig::for_dataset(dataset);
    mc.widths = TopologyWidths {
        conv: cfg.list("conv_widths")?,
        lead: cfg.list("lead_widths")?,
        fc_hidden: cfg.get("fc_hidden")?,
        kernel: cfg.get("kernel")?,
        local_side: cfg.get("local_side")?,
    };
    mc.fusion_hidden = cfg.get("fusion_hidden")?;
    mc.iterations = cfg.get("T")?;
    mc.si = SiOptions {
        correction_factors: cfg.flag("correction_factors")?,
        include_self: cfg.flag("include_self")?,
    };
    Ok(mc)
}

/// Sample indices of one fold's test, validation and training parts: test is
/// fold `t`, validation fold `t+1 mod k`, training the rest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn fold_split(dataset: &Dataset, k: usize, t: usize, seed: u64) -> Result<FoldSplit> {
    if k < 3 {
        return Err(Error::Config(format!("need at least 3 folds for train/val/test, got {k}")));
    }
    if t >= k {
        return Err(Error::Config(format!("fold {t} out of range for {k} folds")));
    }
    let folds = make_folds(dataset, k, seed)?;
    let v = (t + 1) % k;
    let mut train: Vec<usize> = (0..k)
        .filter(|&i| i != t && i != v)
        .flat_map(|i| folds[i].indices.iter().copied())
        .collect();
    train.sort_unstable();
    Ok(FoldSplit {
        train,
        val: folds[v].indices.clone(),
        test: folds[t].indices.clone(),
    })
}

fn fold_list(cfg: &RunConfig) -> Result<Vec<usize>> {
    let k: usize = cfg.get("folds")?;
    if cfg.raw("fold") == "all" {
        Ok((0..k).collect())
    } else {
        Ok(vec![cfg.get("fold")?])
    }
}

fn cmd_train(cfg: &RunConfig) -> Result<PathBuf> {
    let tc = train_config(cfg)?;
    let dataset = load_manifest(Path::new(cfg.raw("data")))?;
    let mc = model_config(cfg, &dataset)?;
    let seed: u64 = cfg.get("seed")?;
    // a topology that cannot be built is a configuration mistake
    ModelParams::init(mc.clone(), seed).map_err(|e| match e {
        Error::Dimension { .. } | Error::Domain { .. } => Error::Config(format!("model topology: {e}")),
        e => e,
    })?;
    let k: usize = cfg.get("folds")?;
    let folds = fold_list(cfg)?;
    // validate every fold before spending time on training
    let splits = folds
        .iter()
        .map(|&t| fold_split(&dataset, k, t, seed))
        .collect::<Result<Vec<_>>>()?;
    let out = cfg.output_dir();
    create_dir(&out)?;
    cfg.persist(&out)?;
    for (&t, split) in folds.iter().zip(&splits) {
        let dir = if folds.len() > 1 { out.join(format!("fold{t}")) } else { out.clone() };
        create_dir(&dir)?;
        let train = dataset.subset(&split.train);
        let val = dataset.subset(&split.val);
        let mut model = ModelParams::init(mc.clone(), seed)?;
        let outcome = staged_train(&mut model, &train, &val, &tc, |_, _| {})?;
        let last = tc.stages.last().map_or(0, |s| s.id());
        save_checkpoint(&dir.join(CHECKPOINT_FILE), &model, outcome.optimizer.as_ref(), last)?;
        outcome.history.save(&dir)?;
    }
    Ok(out)
}

fn load_for(cfg: &RunConfig, dataset: &Dataset) -> Result<ModelParams> {
    let ckpt = load_checkpoint(Path::new(cfg.raw("checkpoint")))?;
    ckpt.model.config.check_dataset(dataset)?;
    Ok(ckpt.model)
}

/// Heads in report order: each stream, the fusion, the structure inference.
fn heads(p: &Predictions) -> Vec<(String, &Vec<Vec<f64>>)> {
    let mut out: Vec<(String, &Vec<Vec<f64>>)> =
        p.streams.iter().enumerate().map(|(i, s)| (format!("stream{i}"), s)).collect();
    out.push(("fusion".into(), &p.fused));
    out.push(("structure".into(), &p.structure));
    out
}

pub fn label_names(n: usize) -> Vec<String> {
    (0..n).map(|j| format!("au{j}")).collect()
}

fn cmd_eval(cfg: &RunConfig) -> Result<PathBuf> {
    let dataset = load_manifest(Path::new(cfg.raw("data")))?;
    let mut model = load_for(cfg, &dataset)?;
    let batch: usize = cfg.get("batch_size")?;
    let k: usize = cfg.get("folds")?;
    let split = fold_split(&dataset, k, cfg.get("fold")?, cfg.get("seed")?)?;
    let target = match cfg.raw("split") {
        "test" => dataset.subset(&split.test),
        "val" => dataset.subset(&split.val),
        "all" => dataset.clone(),
        other => return Err(Error::Config(format!("key `split`: expected test, val or all, got {other:?}"))),
    };
    let grid: Vec<f64> = match cfg.list("grid")? {
        g if g.is_empty() => default_grid(),
        g => g,
    };
    let tune = cfg.flag("tune_thresholds")?;
    let labels = target.labels();
    let n = dataset.num_labels();
    let preds = predict(&mut model, &target, batch)?;
    let val_preds = if tune {
        let val = dataset.subset(&split.val);
        Some((predict(&mut model, &val, batch)?, val.labels()))
    } else {
        None
    };
    let mut head_reports = Vec::new();
    for (i, (name, scores)) in heads(&preds).into_iter().enumerate() {
        let report = f1_frame(scores, &labels, &vec![0.5; n])?;
        let tuned = match &val_preds {
            Some((vp, vl)) => {
                let tau = tune_thresholds(heads(vp)[i].1, vl, &grid)?;
                Some(f1_frame(scores, &labels, &tau)?)
            }
            None => None,
        };
        head_reports.push(HeadReport {
            head: name,
            report,
            tuned,
            sweep: tau_sweep(scores, &labels, &grid)?,
        });
    }
    let run = RunReport {
        label_names: label_names(n),
        label_stats: label_stats(&labels)?,
        correlation: au_correlation_matrix(&labels)?,
        heads: head_reports,
    };
    let out = cfg.output_dir();
    write_run_report(&out, &run)?;
    write_text(&out.join("trace.tsv"), &trace_tsv(&preds))?;
    cfg.persist(&out)?;
    Ok(out)
}

/// Per iteration, label-averaged means of messages, correction factors and predictions.
fn trace_tsv(p: &Predictions) -> String {
    let mut s = String::from("t\tmessages\tchi\tpredictions\n");
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    for (t, step) in p.trace.iter().enumerate() {
        let _ = writeln!(
            s,
            "{}\t{:.6}\t{:.6}\t{:.6}",
            t + 1,
            mean(&step.messages),
            mean(&step.chi),
            mean(&step.predictions)
        );
    }
    s
}

fn cmd_predict(cfg: &RunConfig) -> Result<PathBuf> {
    let dataset = load_manifest(Path::new(cfg.raw("data")))?;
    let mut model = load_for(cfg, &dataset)?;
    let preds = predict(&mut model, &dataset, cfg.get("batch_size")?)?;
    let names = label_names(dataset.num_labels());
    let mut s = String::from("id\tsubject");
    for prefix in ["fusion", "structure"] {
        for name in &names {
            let _ = write!(s, "\t{prefix}_{name}");
        }
    }
    s.push('\n');
    for (i, sample) in dataset.samples().iter().enumerate() {
        let _ = write!(s, "{}\t{}", sample.id, sample.subject);
        for v in preds.fused[i].iter().chain(&preds.structure[i]) {
            let _ = write!(s, "\t{v:.6}");
        }
        s.push('\n');
    }
    let out = cfg.output_dir();
    create_dir(&out)?;
    write_text(&out.join("predictions.tsv"), &s)?;
    cfg.persist(&out)?;
    Ok(out)
}

fn cmd_report(cfg: &RunConfig) -> Result<PathBuf> {
    let input = PathBuf::from(cfg.raw("input"));
    let out = if cfg.raw("output").is_empty() { input.clone() } else { cfg.output_dir() };
    create_dir(&out)?;
    let (_, rows) = read_table(&input.join("correlation.tsv"))?;
    let matrix: Vec<Vec<f64>> = rows.into_iter().map(|(_, v)| v).collect();
    save_png(&render_heatmap(&matrix, 24), &out.join("correlation.png"))?;
    let mut entries: Vec<PathBuf> = fs::read_dir(&input)
        .map_err(|e| Error::io(&input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("tau_sweep_") && n.ends_with(".tsv"))
        })
        .collect();
    entries.sort();
    for path in entries {
        let (_, rows) = read_table(&path)?;
        let sweep = TauSweep {
            grid: rows.iter().map(|(k, _)| k.parse().unwrap_or(f64::NAN)).collect(),
            f1: rows.into_iter().map(|(_, v)| v).collect(),
        };
        let png = out.join(path.with_extension("png").file_name().expect("file name"));
        save_png(&render_tau_sweep(&sweep, 480, 320), &png)?;
    }
    Ok(out)
}
