use std::path::PathBuf;

use irmkit::envgen::{default_beta_grid, make_test_grid, make_training_envs, DataSource, Resampling, Source};
use irmkit::eval::{evaluate_grid, EvalReport, InferenceMode};
use irmkit::experiment::{self, ExperimentConfig};
use irmkit::model::{load_checkpoint, HeadMode};
use irmkit::Error;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        e if e.is_divergence() => PyRuntimeError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

/// Accuracy of one model on a grid of test environments.
#[pyclass(name = "EvalReport", frozen, get_all)]
struct PyEvalReport {
    method: String,
    seed: u64,
    betas: Vec<f64>,
    acc_per_beta: Vec<f64>,
    avg_acc: f64,
    acc_gap: f64,
    config_digest: String,
}

#[pymethods]
impl PyEvalReport {
    fn __repr__(&self) -> String {
        format!("EvalReport(method={:?}, seed={}, avg_acc={:.4}, acc_gap={:.4})", self.method, self.seed, self.avg_acc, self.acc_gap)
    }
}

impl From<EvalReport> for PyEvalReport {
    fn from(r: EvalReport) -> Self {
        Self {
            method: r.method,
            seed: r.seed,
            betas: r.betas,
            acc_per_beta: r.acc_per_beta,
            avg_acc: r.avg_acc,
            acc_gap: r.acc_gap,
            config_digest: r.config_digest,
        }
    }
}

/// Runs every trial of a TOML or JSON experiment config.
#[pyfunction]
fn run(py: Python<'_>, config_path: PathBuf) -> PyResult<Vec<PyEvalReport>> {
    let cfg = ExperimentConfig::load(&config_path).map_err(to_py)?;
    let reports = py.detach(|| experiment::run(&cfg)).map_err(to_py)?;
    Ok(reports.into_iter().map(Into::into).collect())
}

/// SHA-256 of the canonical config, excluding the output directory.
#[pyfunction]
fn config_digest(config_path: PathBuf) -> PyResult<String> {
    Ok(ExperimentConfig::load(&config_path).map_err(to_py)?.digest())
}

/// Per-method mean ± std table over accuracy CSVs or run directories.
#[pyfunction]
fn compare(paths: Vec<PathBuf>) -> PyResult<String> {
    Ok(experiment::compare(&paths).map_err(to_py)?.table())
}

#[pyfunction]
#[pyo3(name = "default_beta_grid")]
fn beta_grid() -> Vec<f64> {
    default_beta_grid()
}

/// One synthetic environment as `(features, labels)`, features row-major.
#[pyfunction]
#[pyo3(signature = (alpha, beta, n, seed, feature_dim = 2))]
fn make_environment(alpha: f64, beta: f64, n: usize, seed: u64, feature_dim: usize) -> PyResult<(Vec<Vec<f64>>, Vec<u8>)> {
    let source = Source::from_descriptor(&DataSource::SyntheticTwoBit {
        feature_dim,
        noise_std: irmkit::envgen::DEFAULT_NOISE_STD,
    })
    .map_err(to_py)?;
    let mut envs = make_training_envs(&[(alpha, beta)], n, seed, &source, &Resampling::default()).map_err(to_py)?;
    let env = envs.remove(0);
    let rows = env.features.data().chunks(feature_dim).map(<[f64]>::to_vec).collect();
    Ok((rows, env.labels))
}

/// Evaluates a saved checkpoint on a freshly generated synthetic test grid.
#[pyfunction]
#[pyo3(signature = (checkpoint, alpha = 0.25, betas = None, n_per_env = 10_000, seed = 0))]
fn evaluate_checkpoint(
    py: Python<'_>,
    checkpoint: PathBuf,
    alpha: f64,
    betas: Option<Vec<f64>>,
    n_per_env: usize,
    seed: u64,
) -> PyResult<PyEvalReport> {
    let (params, meta) = load_checkpoint(&checkpoint).map_err(to_py)?;
    let betas = betas.unwrap_or_else(default_beta_grid);
    let source = Source::from_descriptor(&DataSource::SyntheticTwoBit {
        feature_dim: params.input_dim,
        noise_std: irmkit::envgen::DEFAULT_NOISE_STD,
    })
    .map_err(to_py)?;
    let mode = match params.head_mode() {
        HeadMode::PerEnv => InferenceMode::ConsensusHead,
        _ => InferenceMode::Shared,
    };
    let report = py
        .detach(|| {
            let grid = make_test_grid(alpha, &betas, n_per_env, seed, &source)?;
            evaluate_grid(&params, &grid, mode)
        })
        .map_err(to_py)?;
    Ok(report.labeled("checkpoint", meta.seed, "").into())
}

#[pymodule]
#[pyo3(name = "irmkit")]
fn irmkit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyEvalReport>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(config_digest, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(beta_grid, m)?)?;
    m.add_function(wrap_pyfunction!(make_environment, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_checkpoint, m)?)?;
    Ok(())
}
