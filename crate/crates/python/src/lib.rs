//! Python bindings: pipeline steps, retrieval metrics, clustering, the
//! adaptor forward and the redundancy-reduction objective.
//!
//! Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyArithmeticError, PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use grappa::adaptors::{adaptor_forward as core_adaptor_forward, AdaptorLayer};
use grappa::fusion::{barlow_twins_loss as core_barlow, cross_correlation as core_cross_correlation, BarlowConfig, FusionVariant};
use grappa::pipeline::{PipelineConfig, Runner, Step};
use grappa::pseudolabels::kmeans_fit;
use grappa::retrieval::{evaluate_task as core_evaluate_task, EvalTask};
use grappa::GrappaError;

fn to_py(e: GrappaError) -> PyErr {
    let msg = e.to_string();
    match e {
        GrappaError::Config(_) | GrappaError::Shape(_) | GrappaError::Data(_) | GrappaError::ZeroNorm(_) => {
            PyValueError::new_err(msg)
        }
        GrappaError::MissingArtifact { .. } => PyFileNotFoundError::new_err(msg),
        GrappaError::Diverged { .. } | GrappaError::NonFinite { .. } => PyArithmeticError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn json_to_py(py: Python<'_>, value: &impl serde::Serialize) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// A parsed pipeline configuration.
#[pyclass(name = "Config", module = "pygrappa", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: PipelineConfig,
    text: String,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, text) = PipelineConfig::load(&path).map_err(to_py)?;
        Ok(Self { inner, text })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = PipelineConfig::from_toml(text).map_err(to_py)?;
        Ok(Self {
            inner,
            text: text.to_string(),
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(to_py)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn granularities(&self) -> Vec<usize> {
        self.inner.pseudolabels.granularities.clone()
    }
}

/// A run directory driven step by step.
#[pyclass(name = "Run", module = "pygrappa", unsendable)]
struct PyRun {
    inner: Runner,
}

#[pymethods]
impl PyRun {
    #[new]
    #[pyo3(signature = (config, out=None, verbose=false))]
    fn new(config: &PyConfig, out: Option<PathBuf>, verbose: bool) -> PyResult<Self> {
        let mut inner = Runner::new(config.inner.clone(), config.text.clone(), out).map_err(to_py)?;
        inner.verbose = verbose;
        Ok(Self { inner })
    }

    #[getter]
    fn root(&self) -> PathBuf {
        self.inner.layout.root.clone()
    }

    fn pseudolabels(&mut self) -> PyResult<()> {
        self.inner.pseudolabels().map_err(to_py)
    }

    /// All granularities when `granularity` is omitted.
    #[pyo3(signature = (granularity=None))]
    fn train_adaptors(&mut self, granularity: Option<usize>) -> PyResult<()> {
        self.inner.train_adaptors(granularity).map_err(to_py)
    }

    #[pyo3(signature = (variant="ac", supervised=false))]
    fn train_fusion(&mut self, variant: &str, supervised: bool) -> PyResult<()> {
        let v: FusionVariant = variant.parse().map_err(to_py)?;
        self.inner.train_fusion(v, supervised).map_err(to_py)
    }

    /// Evaluates every artifact of the run and returns the summary.
    fn evaluate(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let summary = self.inner.evaluate_all().map_err(to_py)?;
        json_to_py(py, &summary)
    }

    /// Report of one checkpoint, optionally against a baseline checkpoint.
    #[pyo3(signature = (model, baseline=None, tasks=None))]
    fn evaluate_model(
        &self,
        py: Python<'_>,
        model: PathBuf,
        baseline: Option<PathBuf>,
        tasks: Option<PathBuf>,
    ) -> PyResult<Py<PyAny>> {
        let report = self
            .inner
            .evaluate(&model, baseline.as_deref(), tasks.as_deref())
            .map_err(to_py)?;
        json_to_py(py, &report)
    }

    /// Every step in order, then evaluation.
    fn all(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        self.inner.run(Step::All).map_err(to_py)?;
        let text = std::fs::read_to_string(self.inner.layout.summary()).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
    }
}

/// Leave-one-out R-Precision and MAP@R of one labeled embedding set.
#[pyfunction]
fn evaluate_task(py: Python<'_>, embeddings: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<Py<PyAny>> {
    let task = EvalTask {
        name: "task".into(),
        embeddings: matrix(embeddings)?,
        labels,
    };
    let report = core_evaluate_task(&task).map_err(to_py)?;
    json_to_py(py, &report)
}

#[pyfunction]
fn r_precision(ranking: Vec<usize>, relevant: Vec<bool>, r: usize) -> Option<f64> {
    grappa::retrieval::r_precision(&ranking, &relevant, r)
}

#[pyfunction]
fn map_at_r(ranking: Vec<usize>, relevant: Vec<bool>, r: usize) -> Option<f64> {
    grappa::retrieval::map_at_r(&ranking, &relevant, r)
}

/// Returns `(assignments, centroids, inertia)`.
#[pyfunction]
#[pyo3(signature = (points, k, seed=0, max_iters=100, tol=1e-4))]
fn kmeans(points: Vec<Vec<f64>>, k: usize, seed: u64, max_iters: usize, tol: f64) -> PyResult<(Vec<usize>, Vec<Vec<f64>>, f64)> {
    let set = kmeans_fit(&matrix(points)?, k, seed, max_iters, tol).map_err(to_py)?;
    Ok((set.assignments, rows(&set.centroids), set.inertia))
}

/// Residual bottleneck adaptor applied to token rows; weights are
/// `(in, out)` matrices, biases plain vectors.
#[pyfunction]
fn adaptor_forward(
    tokens: Vec<Vec<f64>>,
    down_weight: Vec<Vec<f64>>,
    down_bias: Vec<f64>,
    up_weight: Vec<Vec<f64>>,
    up_bias: Vec<f64>,
) -> PyResult<Vec<Vec<f64>>> {
    let mut layer = AdaptorLayer::init(1, 1, 0.0, true, &mut ChaCha8Rng::seed_from_u64(0));
    layer.down.weight = matrix(down_weight)?;
    layer.down.bias = matrix(vec![down_bias])?;
    layer.up.weight = matrix(up_weight)?;
    layer.up.bias = matrix(vec![up_bias])?;
    if layer.down.weight.ncols() != layer.down.bias.ncols()
        || layer.up.weight.nrows() != layer.down.weight.ncols()
        || layer.up.weight.ncols() != layer.up.bias.ncols()
        || layer.up.weight.ncols() != layer.down.weight.nrows()
    {
        return Err(PyValueError::new_err("inconsistent adaptor shapes"));
    }
    let out = core_adaptor_forward(&matrix(tokens)?, &layer).map_err(to_py)?;
    Ok(rows(&out))
}

/// Unscaled redundancy-reduction objective of two views.
#[pyfunction]
#[pyo3(signature = (za, zb, beta=0.005))]
fn barlow_twins_loss(za: Vec<Vec<f64>>, zb: Vec<Vec<f64>>, beta: f64) -> PyResult<f64> {
    let config = BarlowConfig {
        beta,
        ..BarlowConfig::default()
    };
    core_barlow(&matrix(za)?, &matrix(zb)?, None, &config).map_err(to_py)
}

#[pyfunction]
fn cross_correlation(za: Vec<Vec<f64>>, zb: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let (a, b) = (matrix(za)?, matrix(zb)?);
    if a.dim() != b.dim() {
        return Err(PyValueError::new_err("views must have the same shape"));
    }
    Ok(rows(&core_cross_correlation(&a, &b, &BarlowConfig::default())))
}

/// Sizes the worker pool from the thread-count environment variable.
#[pyfunction]
fn init_threads() -> PyResult<()> {
    grappa::pipeline::init_threads().map_err(to_py)
}

#[pymodule]
fn pygrappa(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyRun>()?;
    m.add_function(wrap_pyfunction!(evaluate_task, m)?)?;
    m.add_function(wrap_pyfunction!(r_precision, m)?)?;
    m.add_function(wrap_pyfunction!(map_at_r, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(adaptor_forward, m)?)?;
    m.add_function(wrap_pyfunction!(barlow_twins_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cross_correlation, m)?)?;
    m.add_function(wrap_pyfunction!(init_threads, m)?)?;
    m.add("THREADS_ENV", grappa::pipeline::THREADS_ENV)?;
    Ok(())
}
