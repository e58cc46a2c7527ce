//! Python bindings.
//!
//! Build with `maturin develop -m crates/py/Cargo.toml` (the
//! `extension-module` feature is enabled through `pyproject.toml`).

use std::path::Path;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use specsim_core::acceptance::{expected_accepted as core_expected_accepted, ArTable};
use specsim_core::config::ExperimentConfig;
use specsim_core::cost_model::{self, BatchProfile};
use specsim_core::engine::Policy;
use specsim_core::estimator::{estimate_goodput as core_estimate_goodput, SloConfig};
use specsim_core::experiment;
use specsim_core::profiler::{fit_coefficients as core_fit, TimingSample};
use specsim_core::workload::{synth_trace as core_synth_trace, SynthParams, TracePattern};
use specsim_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Json(_) | Error::Csv(_) | Error::Oracle(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Linear forward-pass cost `alpha * n_context + gamma * n_batch + delta` (ms).
#[pyclass(name = "Coefficients", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
struct PyCoefficients(cost_model::PerformanceCoefficients);

#[pymethods]
impl PyCoefficients {
    #[new]
    fn new(alpha: f64, gamma: f64, delta: f64) -> PyResult<Self> {
        cost_model::PerformanceCoefficients::new(alpha, gamma, delta)
            .map(Self)
            .map_err(py_err)
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.0.alpha
    }
    #[getter]
    fn gamma(&self) -> f64 {
        self.0.gamma
    }
    #[getter]
    fn delta(&self) -> f64 {
        self.0.delta
    }

    fn forward_time(&self, n_context: f64, n_batch: f64) -> f64 {
        cost_model::forward_time(&self.0, n_context, n_batch)
    }

    fn __repr__(&self) -> String {
        format!(
            "Coefficients(alpha={}, gamma={}, delta={})",
            self.0.alpha, self.0.gamma, self.0.delta
        )
    }
}

#[pyclass(name = "ModelPair", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
struct PyModelPair(cost_model::ModelPair);

#[pymethods]
impl PyModelPair {
    #[new]
    fn new(draft: PyRef<'_, PyCoefficients>, target: PyRef<'_, PyCoefficients>) -> PyResult<Self> {
        let pair = cost_model::ModelPair {
            draft: draft.0,
            target: target.0,
        };
        pair.validate().map_err(py_err)?;
        Ok(Self(pair))
    }

    #[getter]
    fn draft(&self) -> PyCoefficients {
        PyCoefficients(self.0.draft)
    }
    #[getter]
    fn target(&self) -> PyCoefficients {
        PyCoefficients(self.0.target)
    }
}

/// Step time for `sl` lockstep draft passes plus verification.
#[pyfunction]
fn spec_step_time(pair: PyRef<'_, PyModelPair>, contexts: Vec<usize>, sl: usize) -> PyResult<f64> {
    let profile = BatchProfile::with_contexts(contexts).map_err(py_err)?;
    Ok(cost_model::spec_step_time(&pair.0, &profile, sl))
}

/// `(a, b, c)` of the per-request step-time quadratic.
#[pyfunction]
fn quadratic_coeffs(
    pair: PyRef<'_, PyModelPair>,
    avg_context: f64,
    batch_size: usize,
) -> PyResult<(f64, f64, f64)> {
    if batch_size == 0 {
        return Err(PyValueError::new_err("batch_size must be >= 1"));
    }
    let q = cost_model::quadratic_coeffs(&pair.0, avg_context, batch_size);
    Ok((q.a, q.b, q.c))
}

/// Expected accepted tokens for a table of acceptance-rate rows.
#[pyfunction]
fn expected_accepted(ar_rows: Vec<Vec<f64>>) -> PyResult<f64> {
    Ok(core_expected_accepted(
        &ArTable::from_rows(ar_rows).map_err(py_err)?,
    ))
}

/// Goodput estimate, or `None` when the step would break the TPOT limit.
#[pyfunction]
#[pyo3(signature = (pair, contexts, ar_rows, sunk_draft_time=0.0, tpot_limit_ms=30.0, scale=1.0))]
fn estimate_goodput(
    pair: PyRef<'_, PyModelPair>,
    contexts: Vec<usize>,
    ar_rows: Vec<Vec<f64>>,
    sunk_draft_time: f64,
    tpot_limit_ms: f64,
    scale: f64,
) -> PyResult<Option<f64>> {
    let table = ArTable::from_rows(ar_rows).map_err(py_err)?;
    let profile = BatchProfile::with_contexts(contexts)
        .and_then(|p| p.with_pending(table.row_lens()))
        .map_err(py_err)?;
    let slo = SloConfig {
        tpot_limit_ms,
        scale,
        ..SloConfig::default()
    };
    slo.validate().map_err(py_err)?;
    let est =
        core_estimate_goodput(&profile, &table, &slo, &pair.0, sunk_draft_time).map_err(py_err)?;
    Ok(est.value)
}

/// Least-squares fit over `(n_context, n_batch, elapsed_ms)` samples.
#[pyfunction]
fn fit_coefficients(samples: Vec<(f64, f64, f64)>) -> PyResult<PyCoefficients> {
    let samples: Vec<TimingSample> = samples
        .into_iter()
        .map(|(n_context, n_batch, elapsed)| TimingSample {
            n_context,
            n_batch,
            elapsed,
        })
        .collect();
    Ok(PyCoefficients(
        core_fit(&samples).map_err(py_err)?.coefficients,
    ))
}

/// Synthetic trace as a list of `(arrival_ms, category, input_tokens, output_tokens)`.
#[pyfunction]
#[pyo3(signature = (pattern, duration_ms, seed=0))]
fn synth_trace(
    pattern: &str,
    duration_ms: f64,
    seed: u64,
) -> PyResult<Vec<(f64, String, usize, usize)>> {
    let pattern = match pattern {
        "bursty" => TracePattern::Bursty,
        "steady_high" => TracePattern::SteadyHigh,
        "steady_low" => TracePattern::SteadyLow,
        other => return Err(PyValueError::new_err(format!("unknown pattern `{other}`"))),
    };
    let events =
        core_synth_trace(&SynthParams::preset(pattern, duration_ms), seed).map_err(py_err)?;
    Ok(events
        .into_iter()
        .map(|e| (e.arrival_ms, e.category, e.input_tokens, e.output_tokens))
        .collect())
}

/// Run the experiment described by a TOML config and return its summary as a dict.
#[pyfunction]
#[pyo3(signature = (config, policy=None, seed=None, scale=None))]
fn simulate<'py>(
    py: Python<'py>,
    config: &str,
    policy: Option<&str>,
    seed: Option<u64>,
    scale: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = ExperimentConfig::load(Path::new(config)).map_err(py_err)?;
    if let Some(p) = policy {
        cfg.policy = p.parse::<Policy>().map_err(py_err)?;
        cfg.label = None;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(s) = scale {
        cfg.slo.scale = s;
    }
    let exp = cfg.resolve().map_err(py_err)?;
    let summary = py.detach(|| experiment::simulate(&exp)).map_err(py_err)?;
    let json =
        serde_json::to_string(&summary).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (json,))
}

#[pymodule]
fn specsim(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCoefficients>()?;
    m.add_class::<PyModelPair>()?;
    m.add_function(wrap_pyfunction!(spec_step_time, m)?)?;
    m.add_function(wrap_pyfunction!(quadratic_coeffs, m)?)?;
    m.add_function(wrap_pyfunction!(expected_accepted, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_goodput, m)?)?;
    m.add_function(wrap_pyfunction!(fit_coefficients, m)?)?;
    m.add_function(wrap_pyfunction!(synth_trace, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
