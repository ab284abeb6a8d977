//! Python bindings. Structured results cross the boundary as JSON strings.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use maxfl::config::{ExperimentConfig, MeanEstConfig};
use maxfl::meanest::{self, Estimator, SurrogateKind, DEFAULT_GRID_STEP};
use maxfl::{AppealGap, Purpose, RngStream, WeightMode};

fn py_err(e: maxfl::Error) -> PyErr {
    match e {
        maxfl::Error::Config { .. } => PyValueError::new_err(e.to_string()),
        _ => PyOSError::new_err(e.to_string()),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn parse_mode(mode: &str) -> PyResult<WeightMode> {
    match mode {
        "sigmoid_derivative" => Ok(WeightMode::SigmoidDerivative),
        "raw_sigmoid" => Ok(WeightMode::RawSigmoid),
        _ => Err(PyValueError::new_err(format!("unknown weight mode {mode:?}"))),
    }
}

fn parse_estimator(name: &str) -> PyResult<Estimator> {
    Estimator::ALL
        .into_iter()
        .find(|e| e.as_str() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown estimator {name:?}")))
}

fn parse_surrogate(name: &str) -> PyResult<SurrogateKind> {
    match name {
        "sigmoid" => Ok(SurrogateKind::Sigmoid),
        "softplus" => Ok(SurrogateKind::Softplus),
        "relu" => Ok(SurrogateKind::Relu),
        _ => Err(PyValueError::new_err(format!("unknown surrogate {name:?}"))),
    }
}

#[pyfunction]
fn sigmoid(x: f64) -> f64 {
    maxfl::sigmoid(x)
}

#[pyfunction]
#[pyo3(signature = (gap, mode = "sigmoid_derivative"))]
fn weight_from_gap(gap: f64, mode: &str) -> PyResult<f64> {
    Ok(maxfl::weight_from_gap(AppealGap(gap), parse_mode(mode)?))
}

#[pyfunction]
fn appeals(loss: f64, rho: f64) -> bool {
    maxfl::appeals(loss, rho)
}

#[pyfunction]
fn fedavg_upper_bound(gamma_g2: f64, gamma2: f64) -> f64 {
    meanest::fedavg_upper_bound(gamma_g2, gamma2)
}

#[pyfunction]
fn maxfl_lower_bound(gamma2: f64) -> f64 {
    meanest::maxfl_lower_bound(gamma2)
}

#[pyfunction]
#[pyo3(signature = (estimator, theta_hat, grid_step = DEFAULT_GRID_STEP))]
fn estimate(estimator: &str, theta_hat: Vec<f64>, grid_step: f64) -> PyResult<f64> {
    if theta_hat.is_empty() {
        return Err(PyValueError::new_err("theta_hat is empty"));
    }
    Ok(parse_estimator(estimator)?.estimate(&theta_hat, grid_step))
}

#[pyfunction]
#[pyo3(signature = (theta_hat, surrogate = "sigmoid", grid_step = DEFAULT_GRID_STEP))]
fn local_minima(theta_hat: Vec<f64>, surrogate: &str, grid_step: f64) -> PyResult<Vec<f64>> {
    Ok(meanest::local_minima(&theta_hat, parse_surrogate(surrogate)?, grid_step))
}

/// Monte-Carlo expected appeal; returns `(mean, stderr)`.
#[pyfunction]
#[pyo3(signature = (estimator, theta, gamma2, trials = 10_000, seed = 0))]
fn expected_appeal(estimator: &str, theta: Vec<f64>, gamma2: f64, trials: usize, seed: u64) -> PyResult<(f64, f64)> {
    let stream = RngStream::server(seed, 0, Purpose::Trial);
    let est = meanest::expected_appeal(parse_estimator(estimator)?, &theta, gamma2, trials, stream).map_err(py_err)?;
    Ok((est.mean, est.stderr))
}

/// Parses and validates a TOML experiment config; returns it with defaults filled.
#[pyfunction]
fn validate_config(toml: &str) -> PyResult<String> {
    Ok(ExperimentConfig::from_toml_str(toml).map_err(py_err)?.to_toml_string())
}

/// Runs every seed of a TOML config and returns the run summary as JSON.
#[pyfunction]
#[pyo3(signature = (toml, out_dir = None))]
fn run_experiment(py: Python<'_>, toml: &str, out_dir: Option<PathBuf>) -> PyResult<String> {
    let config = ExperimentConfig::from_toml_str(toml).map_err(py_err)?;
    let summary = py
        .detach(|| maxfl::run_experiment(&config, out_dir.as_deref()))
        .map_err(py_err)?;
    to_json(&summary)
}

/// Runs the appeal sweep and returns its rows as JSON.
#[pyfunction]
#[pyo3(signature = (toml = "", out_dir = None))]
fn run_meanest(py: Python<'_>, toml: &str, out_dir: Option<PathBuf>) -> PyResult<String> {
    let config = MeanEstConfig::from_toml_str(toml).map_err(py_err)?;
    let (_, rows) = py
        .detach(|| maxfl::run_meanest(&config, out_dir.as_deref()))
        .map_err(py_err)?;
    to_json(&rows)
}

/// One seed of an experiment, stepped a round at a time.
#[pyclass]
struct Simulation {
    inner: maxfl::Simulation,
}

#[pymethods]
impl Simulation {
    #[new]
    fn new(toml: &str, seed: u64) -> PyResult<Self> {
        let config = ExperimentConfig::from_toml_str(toml).map_err(py_err)?;
        Ok(Simulation {
            inner: maxfl::Simulation::new(&config, seed).map_err(py_err)?,
        })
    }

    #[getter]
    fn round(&self) -> usize {
        self.inner.round()
    }

    fn is_done(&self) -> bool {
        self.inner.is_done()
    }

    #[getter]
    fn params(&self) -> Vec<f64> {
        self.inner.server.w.as_slice().to_vec()
    }

    #[getter]
    fn byzantine(&self) -> Vec<usize> {
        self.inner.byzantine.clone()
    }

    /// Runs one round; returns `(outcome_json, record_json)`.
    fn step(&mut self) -> PyResult<(String, String)> {
        let outcome = self.inner.step().map_err(py_err)?;
        let record = self.inner.record(&outcome).map_err(py_err)?;
        Ok((to_json(&outcome)?, to_json(&record)?))
    }

    /// Runs the remaining rounds; returns the records as JSON.
    fn run(&mut self) -> PyResult<String> {
        to_json(&self.inner.run().map_err(py_err)?)
    }
}

#[pymodule]
fn maxfl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", maxfl::experiment::VERSION)?;
    m.add_function(wrap_pyfunction!(sigmoid, m)?)?;
    m.add_function(wrap_pyfunction!(weight_from_gap, m)?)?;
    m.add_function(wrap_pyfunction!(appeals, m)?)?;
    m.add_function(wrap_pyfunction!(fedavg_upper_bound, m)?)?;
    m.add_function(wrap_pyfunction!(maxfl_lower_bound, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(local_minima, m)?)?;
    m.add_function(wrap_pyfunction!(expected_appeal, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(run_meanest, m)?)?;
    m.add_class::<Simulation>()?;
    Ok(())
}
