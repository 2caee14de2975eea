//! Python bindings: tensors, configuration, pooling and loss functions,
//! retrieval metrics and the end-to-end pipeline.

use std::path::Path;

use fba_core::autodiff::{Graph, Tensor, Var};
use fba_core::evaluator::{self, GallerySet};
use fba_core::losses::{self, Mining};
use fba_core::synthdata::{generate_corpus as generate, Corpus};
use fba_core::trainer::{self, GradcheckOptions, TrainConfig};
use fba_core::{diffpool, Config, Error};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Data(_) | Error::Autodiff(_) => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Dense row-major tensor of floats.
#[pyclass(name = "Tensor", module = "fba", from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Tensor::new(shape, data).map(|inner| Self { inner }).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Build a matrix from a list of equal-length rows.
    #[staticmethod]
    fn from_rows(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(PyValueError::new_err("rows have different lengths"));
        }
        Self::new(vec![r, c], rows.concat())
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    /// Rows of the matrix view (leading extents collapsed).
    fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.inner.rows()).map(|r| self.inner.row(r).to_vec()).collect()
    }

    #[staticmethod]
    fn read_fbt(path: &str) -> PyResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| PyRuntimeError::new_err(format!("{path}: {e}")))?;
        Tensor::read_fbt(&bytes[..]).map(|inner| Self { inner }).map_err(|e| PyValueError::new_err(format!("{path}: {e}")))
    }

    fn write_fbt(&self, path: &str) -> PyResult<()> {
        let mut buf = Vec::new();
        self.inner.write_fbt(&mut buf).map_err(|e| PyValueError::new_err(e.to_string()))?;
        std::fs::write(path, buf).map_err(|e| PyRuntimeError::new_err(format!("{path}: {e}")))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Run configuration with sections encoder, crossmodal, loss, train, data, eval.
#[pyclass(name = "Config", module = "fba", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: Config,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (json = None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(j) => Config::from_json(j).map_err(py_err)?,
            None => Config::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Config::load(Path::new(path)).map(|inner| Self { inner }).map_err(py_err)
    }

    /// Apply a dotted override, e.g. `set("loss.lambda", "0")`.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.apply_override(&format!("{key}={value}")).map_err(py_err)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .flat_keys()
            .into_iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| PyValueError::new_err(format!("unknown config key {key:?}")))
    }

    fn keys(&self) -> Vec<(String, String)> {
        self.inner.flat_keys()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json_pretty().map_err(py_err)
    }
}

#[pyfunction]
fn lr_at(epoch: usize, base_lr: f64, epochs: usize, warmup: usize) -> PyResult<f64> {
    let cfg = TrainConfig { base_lr, epochs, warmup, ..TrainConfig::default() };
    trainer::lr_at(epoch, &cfg).map_err(py_err)
}

fn constant(g: &mut Graph, t: &Tensor) -> PyResult<Var> {
    g.constant(t.clone()).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Column-wise cosine of two N x M attention maps, as a list of M values.
#[pyfunction]
fn attention_similarity(w_fg: &PyTensor, w_bg: &PyTensor) -> PyResult<Vec<f64>> {
    let mut g = Graph::new();
    let (a, b) = (constant(&mut g, &w_fg.inner)?, constant(&mut g, &w_bg.inner)?);
    let s = diffpool::attention_similarity(&mut g, a, b).map_err(py_err)?;
    Ok(g.value(s).data().to_vec())
}

#[pyfunction]
fn minmax_mask(similarity: Vec<f64>) -> PyResult<Vec<f64>> {
    let mut g = Graph::new();
    let s = constant(&mut g, &Tensor::row_vector(similarity))?;
    let m = diffpool::minmax_mask(&mut g, s).map_err(py_err)?;
    Ok(g.value(m).data().to_vec())
}

#[pyfunction]
#[pyo3(signature = (mask, tokens, inverted = false))]
fn pooled_feature(mask: Vec<f64>, tokens: &PyTensor, inverted: bool) -> PyResult<Vec<f64>> {
    let mut g = Graph::new();
    let m = constant(&mut g, &Tensor::row_vector(mask))?;
    let t = constant(&mut g, &tokens.inner)?;
    let f = diffpool::pooled_feature(&mut g, m, t, inverted).map_err(py_err)?;
    Ok(g.value(f).data().to_vec())
}

#[pyfunction]
#[pyo3(signature = (features, labels, margin = 0.3, mining = "batch_hard"))]
fn triplet_loss(features: &PyTensor, labels: Vec<usize>, margin: f64, mining: &str) -> PyResult<f64> {
    let mining = match mining {
        "batch_hard" => Mining::BatchHard,
        "all_valid" => Mining::AllValid,
        m => return Err(PyValueError::new_err(format!("unknown mining mode {m:?}"))),
    };
    let mut g = Graph::new();
    let f = constant(&mut g, &features.inner)?;
    let l = losses::triplet_loss(&mut g, f, &labels, margin, mining).map_err(py_err)?;
    Ok(g.value(l).item())
}

fn four(g: &mut Graph, ts: [&PyTensor; 4]) -> PyResult<[Var; 4]> {
    Ok([constant(g, &ts[0].inner)?, constant(g, &ts[1].inner)?, constant(g, &ts[2].inner)?, constant(g, &ts[3].inner)?])
}

#[pyfunction]
#[pyo3(signature = (fg_text, fg_visual, bg_text, bg_visual, margin = 0.3))]
fn tri_div_loss(fg_text: &PyTensor, fg_visual: &PyTensor, bg_text: &PyTensor, bg_visual: &PyTensor, margin: f64) -> PyResult<f64> {
    let mut g = Graph::new();
    let [a, b, c, d] = four(&mut g, [fg_text, fg_visual, bg_text, bg_visual])?;
    let l = losses::tri_div_loss(&mut g, a, b, c, d, margin).map_err(py_err)?;
    Ok(g.value(l).item())
}

#[pyfunction]
fn con_loss(fg_text: &PyTensor, fg_visual: &PyTensor, bg_text: &PyTensor, bg_visual: &PyTensor) -> PyResult<f64> {
    let mut g = Graph::new();
    let [a, b, c, d] = four(&mut g, [fg_text, fg_visual, bg_text, bg_visual])?;
    let l = losses::con_loss(&mut g, a, b, c, d).map_err(py_err)?;
    Ok(g.value(l).item())
}

/// mAP / CMC over L2-normalized embeddings; camid -1 disables same-camera exclusion.
#[pyfunction]
#[pyo3(signature = (features, pids, camids, is_query, threads = 1))]
fn map_cmc<'py>(
    py: Python<'py>,
    features: &PyTensor,
    pids: Vec<usize>,
    camids: Vec<i64>,
    is_query: Vec<bool>,
    threads: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let gallery = GallerySet { features: features.inner.clone(), pids, camids, is_query };
    let r = evaluator::map_cmc(&gallery, threads).map_err(py_err)?;
    to_py(py, &r)
}

#[pyfunction]
fn generate_corpus(config: &PyConfig, out: &str) -> PyResult<usize> {
    let c = &config.inner;
    generate(&c.data, Path::new(out), c.encoder.max_text_len).map(|r| r.len()).map_err(py_err)
}

/// Train on the corpus at `data.root`, writing the run directory to `out`.
/// Returns the per-step log records.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: &PyConfig, out: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg = &config.inner;
    let corpus = Corpus::load(Path::new(&cfg.data.root)).map_err(py_err)?;
    let outcome = py.detach(|| trainer::train_to_dir(cfg, &corpus, Path::new(out))).map_err(py_err)?;
    to_py(py, &outcome.log)
}

/// Evaluate the checkpoint named by the config; returns the report.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
    let cfg = &config.inner;
    let report = py
        .detach(|| -> fba_core::Result<_> {
            let model = fba_core::model::Model::load(&evaluator::checkpoint_dir(cfg))?;
            let corpus = Corpus::load(Path::new(&cfg.data.root))?;
            Ok(evaluator::evaluate(cfg, &model, &corpus)?.0)
        })
        .map_err(py_err)?;
    to_py(py, &report)
}

#[pyfunction]
#[pyo3(signature = (config, coords = 64, eps = 1e-6))]
fn gradcheck<'py>(py: Python<'py>, config: &PyConfig, coords: usize, eps: f64) -> PyResult<Bound<'py, PyAny>> {
    let opts = GradcheckOptions { coords, eps, ..GradcheckOptions::default() };
    let report = py.detach(|| trainer::gradient_check(&config.inner, &opts)).map_err(py_err)?;
    to_py(py, &report)
}

/// Run the command-line interface with `args` (without the program name).
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    py.detach(|| fba_core::cli::run(std::iter::once("fba".to_string()).chain(args)))
}

#[pymodule]
fn fba(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(attention_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(minmax_mask, m)?)?;
    m.add_function(wrap_pyfunction!(pooled_feature, m)?)?;
    m.add_function(wrap_pyfunction!(triplet_loss, m)?)?;
    m.add_function(wrap_pyfunction!(tri_div_loss, m)?)?;
    m.add_function(wrap_pyfunction!(con_loss, m)?)?;
    m.add_function(wrap_pyfunction!(map_cmc, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
