//! Python bindings: models, training, density grids, sampling and AUC.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nae::cli::{self, Checkpoint, ExperimentConfig, SampleMode};
use nae::density::{compute_log_omega, GridSpec};
use nae::diff::Tensor;
use nae::eval::ScoredDataset;
use nae::model::{AutoencoderModel, Energy};
use nae::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Shape { .. } | Error::Parse(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    let n = rows.len();
    Tensor::new(vec![n, width], rows.into_iter().flatten().collect()).map_err(to_py)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.iter_rows().map(<[f64]>::to_vec).collect()
}

fn config(toml: Option<&str>) -> PyResult<ExperimentConfig> {
    match toml {
        Some(text) => ExperimentConfig::from_toml(text).map_err(to_py),
        None => Ok(ExperimentConfig::default()),
    }
}

/// An autoencoder whose reconstruction error is a Gibbs energy.
#[pyclass(name = "Model", module = "pynae")]
struct PyModel {
    inner: AutoencoderModel,
}

#[pymethods]
impl PyModel {
    /// Fresh model for `input_dim`-dimensional data from a TOML config
    /// (defaults when omitted).
    #[new]
    #[pyo3(signature = (input_dim, config=None, seed=0))]
    fn new(input_dim: usize, config: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg = self::config(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inner = AutoencoderModel::new(cfg.model_spec(input_dim), &mut rng).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn identity(dim: usize) -> Self {
        Self {
            inner: AutoencoderModel::identity(dim),
        }
    }

    #[staticmethod]
    fn load(checkpoint: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&checkpoint).map_err(to_py)?;
        Ok(Self {
            inner: ck.model().map_err(to_py)?,
        })
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    #[getter]
    fn temperature(&self) -> f64 {
        self.inner.temperature()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn energy(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.inner.energies(&matrix(x)?).map_err(to_py)
    }

    /// Energies and `∇_x E` per row.
    fn energy_and_grad(&self, x: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let (e, g) = self.inner.energy_and_grad(&matrix(x)?).map_err(to_py)?;
        Ok((e, rows(&g)))
    }

    fn encode(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.encode(&matrix(x)?).map_err(to_py)?))
    }

    fn decode(&self, z: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.decode(&matrix(z)?).map_err(to_py)?))
    }

    /// `log Ω` over `[lo, hi]^D` by the midpoint rule.
    #[pyo3(signature = (resolution=256, lo=-4.0, hi=4.0))]
    fn log_omega(&self, resolution: usize, lo: f64, hi: f64) -> PyResult<f64> {
        let spec = GridSpec::square(self.inner.input_dim(), lo, hi, resolution);
        Ok(compute_log_omega(&self.inner, &spec).map_err(to_py)?.log_omega)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(input_dim={}, latent_dim={}, params={}, T={:.4})",
            self.inner.input_dim(),
            self.inner.latent_dim(),
            self.inner.param_count(),
            self.inner.temperature()
        )
    }
}

/// Trains from TOML text into `out_dir`; returns the final checkpoint path.
#[pyfunction]
#[pyo3(signature = (out_dir, config=None, seed=None))]
fn train(py: Python<'_>, out_dir: PathBuf, config: Option<&str>, seed: Option<u64>) -> PyResult<PathBuf> {
    let cfg = self::config(config)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| to_py(Error::io(&out_dir, e)))?;
    let cfg_path = out_dir.join("config.in.toml");
    std::fs::write(&cfg_path, cfg.to_toml().map_err(to_py)?).map_err(|e| to_py(Error::io(&cfg_path, e)))?;
    let out = py
        .detach(|| cli::cmd_train(Some(&cfg_path), None, seed, Some(&out_dir)))
        .map_err(to_py)?;
    Ok(out.final_checkpoint)
}

/// Writes the density CSV and heat map next to the checkpoint and returns the metrics.
#[pyfunction]
#[pyo3(signature = (checkpoint, resolution=None))]
fn density<'py>(py: Python<'py>, checkpoint: PathBuf, resolution: Option<usize>) -> PyResult<Bound<'py, PyDict>> {
    let m = py.detach(|| cli::cmd_density(&checkpoint, resolution, None)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("heldout_avg_loglik", m.heldout_avg_loglik)?;
    d.set_item("grid_kl", m.grid_kl)?;
    d.set_item("spurious_mass", m.spurious_mass)?;
    Ok(d)
}

/// Samples at stage `mode` (`"z0"`, `"omi"` or `"full"`).
#[pyfunction]
#[pyo3(signature = (checkpoint, n=64, mode="full", seed=None))]
fn sample(py: Python<'_>, checkpoint: PathBuf, n: usize, mode: &str, seed: Option<u64>) -> PyResult<Vec<Vec<f64>>> {
    let mode = match mode {
        "z0" => SampleMode::Z0,
        "omi" => SampleMode::Omi,
        "full" => SampleMode::Full,
        other => return Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
    };
    let x = py.detach(|| cli::cmd_sample(&checkpoint, n, mode, seed, None)).map_err(to_py)?;
    Ok(rows(&x))
}

/// `(outlier_set, auc)` pairs for the checkpoint's default evaluation sets.
#[pyfunction]
#[pyo3(signature = (checkpoint, n=2000, seed=None))]
fn eval_ood(py: Python<'_>, checkpoint: PathBuf, n: usize, seed: Option<u64>) -> PyResult<Vec<(String, f64)>> {
    let res = py
        .detach(|| cli::cmd_eval_ood(&checkpoint, None, None, n, seed, None))
        .map_err(to_py)?;
    Ok(res.into_iter().map(|r| (r.outlier_set, r.auc)).collect())
}

/// Probability that an outlier scores above an inlier (ties count half).
#[pyfunction]
fn auc(inlier_scores: Vec<f64>, outlier_scores: Vec<f64>) -> PyResult<f64> {
    let scored = ScoredDataset::from_groups(&inlier_scores, &outlier_scores).map_err(to_py)?;
    nae::eval::auc(&scored).map_err(to_py)
}

/// Runs the built-in oracle suites: `(name, passed, detail)` per suite.
#[pyfunction]
fn check(py: Python<'_>) -> Vec<(String, bool, String)> {
    py.detach(cli::check::run_all)
        .into_iter()
        .map(|o| (o.name.to_string(), o.passed, o.detail))
        .collect()
}

#[pymodule]
fn pynae(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(density, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(eval_ood, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(check, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
