//! Python bindings for the provider-level DP simulator.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use provider_dp::experiment::ExperimentConfig;
use provider_dp::{dp, fed, secagg, text, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Input(_) | Error::Calibration(_) | Error::InfinitePrivacyLoss => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json_to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (s,))
}

/// Normalized Levenshtein similarity in [0, 1].
#[pyfunction]
fn nls(predicted: &str, gold: &str) -> f64 {
    text::nls(predicted, gold)
}

#[pyfunction]
fn levenshtein(a: &str, b: &str) -> usize {
    text::levenshtein(a, b)
}

/// Scales `update` so its L2 norm is at most `clip`.
#[pyfunction]
fn clip_update(update: Vec<f64>, clip: f64) -> PyResult<Vec<f64>> {
    dp::clip_update(&update, clip).map_err(to_py)
}

/// Returns `(epsilon, order)` after `rounds` subsampled Gaussian steps.
#[pyfunction]
#[pyo3(signature = (sigma, q, rounds, delta = 1e-5))]
fn epsilon_for(sigma: f64, q: f64, rounds: u64, delta: f64) -> PyResult<(f64, f64)> {
    let r = dp::epsilon_for(sigma, q, rounds, delta).map_err(to_py)?;
    Ok((r.epsilon, r.order))
}

#[pyfunction]
#[pyo3(signature = (epsilon, q, rounds, delta = 1e-5))]
fn calibrate_sigma(epsilon: f64, q: f64, rounds: u64, delta: f64) -> PyResult<f64> {
    dp::calibrate_sigma(epsilon, delta, q, rounds).map_err(to_py)
}

/// Bit width of the smallest power-of-two modulus that holds the sum.
#[pyfunction]
fn choose_modulus_bits(max_inf_norm: f64, n_clients: usize) -> PyResult<u8> {
    Ok(secagg::choose_modulus(max_inf_norm, n_clients).map_err(to_py)?.bits())
}

/// Masked-sum round trip; `bound` is the per-client L-inf bound.
#[pyfunction]
#[pyo3(signature = (updates, bound, seed = 0, fixed_point_bits = secagg::DEFAULT_FIXED_POINT_BITS))]
fn secure_sum(updates: Vec<Vec<f64>>, bound: f64, seed: u64, fixed_point_bits: u8) -> PyResult<Vec<f64>> {
    secagg::secure_sum(&updates, bound, fixed_point_bits, seed).map_err(to_py)
}

/// Download plus upload volume in GB.
#[pyfunction]
#[pyo3(signature = (sampled_per_round, trainable_params, bytes_per_param = 4))]
fn communication_cost(sampled_per_round: Vec<usize>, trainable_params: usize, bytes_per_param: usize) -> f64 {
    fed::communication_cost(&sampled_per_round, trainable_params, bytes_per_param)
}

/// Parses and validates a TOML config, returning its hash.
#[pyfunction]
fn config_hash(config_toml: &str) -> PyResult<String> {
    let c = ExperimentConfig::from_toml(config_toml).map_err(to_py)?;
    c.hash().map_err(to_py)
}

/// Runs every configured variant and returns the run manifest as a dict.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, config_toml: &str, out_dir: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let config = ExperimentConfig::from_toml(config_toml).map_err(to_py)?;
    let manifest = py.detach(|| provider_dp::experiment::run_experiment(&config, &out_dir)).map_err(to_py)?;
    json_to_py(py, &manifest)
}

#[pymodule]
#[pyo3(name = "provider_dp")]
fn provider_dp_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(nls, m)?)?;
    m.add_function(wrap_pyfunction!(levenshtein, m)?)?;
    m.add_function(wrap_pyfunction!(clip_update, m)?)?;
    m.add_function(wrap_pyfunction!(epsilon_for, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_sigma, m)?)?;
    m.add_function(wrap_pyfunction!(choose_modulus_bits, m)?)?;
    m.add_function(wrap_pyfunction!(secure_sum, m)?)?;
    m.add_function(wrap_pyfunction!(communication_cost, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
