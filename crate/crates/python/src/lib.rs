//! Python bindings: load a trained checkpoint, score a dataset and run the CLI.

use std::collections::HashMap;
use std::path::Path;

use dsin_core::checkpoint::{config_hash, load_checkpoint};
use dsin_core::data::load_manifest;
use dsin_core::eval::f1_frame;
use dsin_core::model::{predict, ModelParams};
use dsin_core::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Io { .. } | Error::Manifest { .. } | Error::Checkpoint(_) => PyIOError::new_err(err.to_string()),
        Error::Config(_) | Error::Dimension { .. } | Error::Dataset(_) | Error::Domain { .. } => {
            PyValueError::new_err(err.to_string())
        }
        _ => PyRuntimeError::new_err(err.to_string()),
    }
}

/// Macro F1 of `scores` against binary `labels`; thresholds default to 0.5.
pub fn macro_f1_of(scores: &[Vec<f64>], labels: &[Vec<u8>], thresholds: Option<Vec<f64>>) -> dsin_core::Result<f64> {
    let n = labels.first().map_or(0, Vec::len);
    let tau = thresholds.unwrap_or_else(|| vec![0.5; n]);
    Ok(f1_frame(scores, labels, &tau)?.macro_f1)
}

/// Head name to `[sample][label]` probabilities.
pub fn predict_dir(model: &mut ModelParams, data: &Path, batch: usize) -> dsin_core::Result<HashMap<String, Vec<Vec<f64>>>> {
    let dataset = load_manifest(data)?;
    let p = predict(model, &dataset, batch)?;
    let mut out: HashMap<String, Vec<Vec<f64>>> =
        p.streams.into_iter().enumerate().map(|(i, s)| (format!("stream{i}"), s)).collect();
    out.insert("fusion".into(), p.fused);
    out.insert("structure".into(), p.structure);
    Ok(out)
}

/// A trained model read from a checkpoint file.
#[pyclass(name = "Model", module = "pydsin")]
pub struct PyModel {
    model: ModelParams,
    stage: u8,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ckpt = load_checkpoint(Path::new(path)).map_err(to_py)?;
        Ok(Self { model: ckpt.model, stage: ckpt.stage })
    }

    #[getter]
    fn stage(&self) -> u8 {
        self.stage
    }

    #[getter]
    fn num_labels(&self) -> usize {
        self.model.num_labels()
    }

    #[getter]
    fn num_streams(&self) -> usize {
        self.model.num_streams()
    }

    #[getter]
    fn config_hash(&self) -> String {
        config_hash(&self.model.config)
    }

    /// Scores every sample of a dataset directory; returns `{head: [[p, ...], ...]}`.
    #[pyo3(signature = (data, batch_size = 64))]
    fn predict(&mut self, data: &str, batch_size: usize) -> PyResult<HashMap<String, Vec<Vec<f64>>>> {
        predict_dir(&mut self.model, Path::new(data), batch_size).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(labels={}, streams={}, stage={})",
            self.model.num_labels(),
            self.model.num_streams(),
            self.stage
        )
    }
}

#[pyfunction]
#[pyo3(signature = (scores, labels, thresholds = None))]
fn macro_f1(scores: Vec<Vec<f64>>, labels: Vec<Vec<u8>>, thresholds: Option<Vec<f64>>) -> PyResult<f64> {
    macro_f1_of(&scores, &labels, thresholds).map_err(to_py)
}

/// Runs `dsin <args>` in-process and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> u8 {
    dsin_core::cli::run(std::iter::once("dsin".to_owned()).chain(args))
}

#[pymodule]
fn pydsin(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(macro_f1, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
