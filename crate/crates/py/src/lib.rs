//! Python bindings for `fabk`.

use fabk::config::ExperimentConfig;
use fabk::controller::{ExtendedSignDescent as CoreExtended, SearchInterval, SignDescent as CoreSign, SignFeedback};
use fabk::regret::{self, RegretController, RegretSpec, SyntheticCostFamily};
use fabk::sparsify::{self, SelectionResult};
use fabk::{harness, rng, timing, vector, Error};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::Value;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Integrity(_) | Error::Diverged { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_py(py: Python<'_>, v: &Value) -> PyResult<Py<PyAny>> {
    Ok(match v {
        Value::Null => py.None(),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any().unbind(),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any().unbind(),
            (None, Some(u)) => u.into_pyobject(py)?.into_any().unbind(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any().unbind(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        Value::Array(items) => {
            let out = PyList::empty(py);
            for item in items {
                out.append(to_py(py, item)?)?;
            }
            out.into_any().unbind()
        }
        Value::Object(map) => {
            let out = PyDict::new(py);
            for (k, item) in map {
                out.set_item(k, to_py(py, item)?)?;
            }
            out.into_any().unbind()
        }
    })
}

fn serde_to_py<T: serde::Serialize>(py: Python<'_>, x: &T) -> PyResult<Py<PyAny>> {
    let v = serde_json::to_value(x).map_err(|e| PyValueError::new_err(e.to_string()))?;
    to_py(py, &v)
}

fn feedback(sign: Option<i8>) -> SignFeedback {
    match sign {
        None => SignFeedback::Unavailable,
        Some(s) => SignFeedback::of(f64::from(s)),
    }
}

/// Indices of the `k` largest-magnitude entries, largest first.
#[pyfunction]
fn top_k_indices(values: Vec<f64>, k: usize) -> PyResult<Vec<usize>> {
    vector::top_k_indices(&values, k).map_err(py_err)
}

/// `n` stochastic roundings of `k` to an integer in `[1, max]`.
#[pyfunction]
#[pyo3(signature = (k, max, seed, n = 1))]
fn stochastic_round(k: f64, max: usize, seed: u64, n: usize) -> PyResult<Vec<usize>> {
    let mut r = rng::seeded(seed);
    (0..n)
        .map(|_| timing::stochastic_round(k, max, &mut r).map_err(py_err))
        .collect()
}

/// Simulated duration of a round moving `comm_slots` value-slots.
#[pyfunction]
#[pyo3(signature = (comm_slots, dim, comm_time_full = 10.0))]
fn round_time(comm_slots: usize, dim: usize, comm_time_full: f64) -> PyResult<f64> {
    let cfg = timing::TimingConfig::new(comm_time_full);
    cfg.validate().map_err(py_err)?;
    Ok(timing::round_time(&cfg, comm_slots, dim).total)
}

/// Result of a server-side index selection.
#[pyclass(module = "fabk", frozen)]
struct Selection {
    inner: SelectionResult,
}

#[pymethods]
impl Selection {
    #[getter]
    fn indices(&self) -> Vec<usize> {
        self.inner.indices.clone()
    }

    #[getter]
    fn kappa(&self) -> usize {
        self.inner.kappa
    }

    #[getter]
    fn contributed(&self) -> Vec<Vec<usize>> {
        self.inner.contributed.clone()
    }

    /// `(index, value)` pairs of the aggregated update.
    #[getter]
    fn aggregate(&self) -> Vec<(usize, f64)> {
        self.inner.aggregate.entries().to_vec()
    }

    fn min_contribution(&self) -> usize {
        self.inner.min_contribution()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Selection(len={}, kappa={})", self.inner.len(), self.inner.kappa)
    }
}

/// FAB-top-k selection over dense client accumulators.
#[pyfunction]
#[pyo3(signature = (accumulators, k, counts = None))]
fn fab_select(accumulators: Vec<Vec<f64>>, k: usize, counts: Option<Vec<usize>>) -> PyResult<Selection> {
    let reports = accumulators
        .iter()
        .map(|a| sparsify::client_report(a, k.min(a.len())))
        .collect::<fabk::Result<Vec<_>>>()
        .map_err(py_err)?;
    let counts = counts.unwrap_or_else(|| vec![1; reports.len()]);
    let inner = sparsify::fab_select(&reports, k, &counts).map_err(py_err)?;
    Ok(Selection { inner })
}

fn interval(k_min: f64, k_max: f64) -> PyResult<SearchInterval> {
    SearchInterval::new(k_min, k_max).map_err(py_err)
}

/// Sign-based descent on `k` with step `B / √(2m)`.
#[pyclass(module = "fabk")]
struct SignDescent {
    inner: CoreSign,
}

#[pymethods]
impl SignDescent {
    #[new]
    fn new(k_min: f64, k_max: f64, k1: f64) -> PyResult<Self> {
        Ok(SignDescent {
            inner: CoreSign::new(interval(k_min, k_max)?, k1),
        })
    }

    #[getter]
    fn k(&self) -> f64 {
        self.inner.k()
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.inner.delta()
    }

    /// Feeds the sign of the cost derivative (`None` when unknown); returns the new `k`.
    #[pyo3(signature = (sign = None))]
    fn step(&mut self, sign: Option<i8>) -> f64 {
        self.inner.step(feedback(sign))
    }
}

/// Sign descent that shrinks its search interval and restarts.
#[pyclass(module = "fabk")]
struct ExtendedSignDescent {
    inner: CoreExtended,
}

#[pymethods]
impl ExtendedSignDescent {
    #[new]
    #[pyo3(signature = (k_min, k_max, k1, alpha = 1.5, update_window = 20))]
    fn new(k_min: f64, k_max: f64, k1: f64, alpha: f64, update_window: usize) -> PyResult<Self> {
        let inner = CoreExtended::new(interval(k_min, k_max)?, k1, alpha, update_window).map_err(py_err)?;
        Ok(ExtendedSignDescent { inner })
    }

    #[getter]
    fn k(&self) -> f64 {
        self.inner.k()
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.inner.delta()
    }

    #[getter]
    fn interval(&self) -> (f64, f64) {
        let iv = self.inner.interval();
        (iv.min(), iv.max())
    }

    #[getter]
    fn restarts(&self) -> usize {
        self.inner.restarts()
    }

    /// Returns whether this step restarted the search.
    #[pyo3(signature = (sign = None))]
    fn step(&mut self, sign: Option<i8>) -> bool {
        self.inner.step(feedback(sign)).restarted
    }
}

/// Regret of sign descent on the built-in synthetic cost family.
///
/// Returns one dict per horizon with `mean`, `max`, `bound`, `violations`
/// and `per_trial`.
#[pyfunction]
#[pyo3(signature = (controller = "sign", flip_prob = 0.0, trials = 100, horizons = vec![100, 1000, 10000], seed = 0))]
fn regret_experiment(
    py: Python<'_>,
    controller: &str,
    flip_prob: f64,
    trials: usize,
    horizons: Vec<usize>,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let family = SyntheticCostFamily::default_family(seed);
    let controller = match controller {
        "sign" => RegretController::SignDescent,
        "extended" => RegretController::Extended {
            alpha: 1.5,
            update_window: 20,
        },
        other => return Err(PyValueError::new_err(format!("unknown controller {other:?}"))),
    };
    let spec = RegretSpec {
        controller,
        interval: interval(1.0, family.dim() as f64)?,
        flip_prob,
        trials,
        initial_k: None,
        seed,
    };
    let stats = py
        .detach(|| regret::run_regret_experiment(&family, &spec, &horizons))
        .map_err(py_err)?;
    serde_to_py(py, &stats)
}

/// Outcome of a simulated training run.
#[pyclass(module = "fabk", frozen)]
struct Run {
    inner: harness::RunOutcome,
}

#[pymethods]
impl Run {
    /// Per-round records as dicts.
    #[getter]
    fn records(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        serde_to_py(py, &self.inner.records)
    }

    #[getter]
    fn summary(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        serde_to_py(py, &self.inner.summary)
    }

    #[getter]
    fn status(&self) -> String {
        match &self.inner.status {
            harness::RunStatus::ReachedTarget => "reached_target".into(),
            harness::RunStatus::MaxRounds => "max_rounds".into(),
            harness::RunStatus::Diverged { round, reason } => format!("diverged at {round}: {reason}"),
        }
    }

    #[getter]
    fn time_to_target(&self) -> Option<f64> {
        self.inner.time_to_target
    }

    #[getter]
    fn k_sequence(&self) -> Vec<f64> {
        self.inner.k_sequence()
    }

    fn __len__(&self) -> usize {
        self.inner.records.len()
    }
}

fn parse_config(config: &str) -> PyResult<ExperimentConfig> {
    ExperimentConfig::from_toml_str(config).map_err(py_err)
}

/// Runs an experiment described by a TOML string, in memory.
#[pyfunction]
fn simulate(py: Python<'_>, config: &str) -> PyResult<Run> {
    let cfg = parse_config(config)?;
    let inner = py.detach(|| harness::simulate(&cfg)).map_err(py_err)?;
    Ok(Run { inner })
}

/// Runs an experiment and writes `rounds.jsonl` and `summary.csv` to `out_dir`.
#[pyfunction]
fn run_experiment(py: Python<'_>, config: &str, out_dir: &str) -> PyResult<Run> {
    let cfg = parse_config(config)?;
    let inner = py
        .detach(|| harness::run_experiment(&cfg, out_dir))
        .map_err(py_err)?;
    Ok(Run { inner })
}

#[pymodule]
#[pyo3(name = "fabk")]
fn fabk_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(top_k_indices, m)?)?;
    m.add_function(wrap_pyfunction!(stochastic_round, m)?)?;
    m.add_function(wrap_pyfunction!(round_time, m)?)?;
    m.add_function(wrap_pyfunction!(fab_select, m)?)?;
    m.add_function(wrap_pyfunction!(regret_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_class::<Selection>()?;
    m.add_class::<SignDescent>()?;
    m.add_class::<ExtendedSignDescent>()?;
    m.add_class::<Run>()?;
    Ok(())
}
