use std::path::Path;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use fmrivid::eval::{nway_topk, ssim, welch_t_test, NwayConfig, SsimConfig};
use fmrivid::numerics::Tensor;
use fmrivid::pipeline::{Outcome, Run, RunConfig, Stage};
use fmrivid::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::ShapeMismatch { .. } | Error::InvalidShape { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn config_from(text: Option<&str>, profile: &str) -> PyResult<RunConfig> {
    let base = match profile {
        "default" => RunConfig::default(),
        "quick" => RunConfig::quick(),
        _ => return Err(PyValueError::new_err(format!("unknown profile `{profile}` (default|quick)"))),
    };
    RunConfig::parse_over(base, text.unwrap_or("")).map_err(to_py)
}

/// Canonical config text of a profile with optional overrides.
#[pyfunction]
#[pyo3(signature = (overrides=None, profile="default"))]
fn resolve_config(overrides: Option<&str>, profile: &str) -> PyResult<String> {
    Ok(config_from(overrides, profile)?.to_text())
}

/// SHA-256 of the canonical config text.
#[pyfunction]
#[pyo3(signature = (overrides=None, profile="default"))]
fn config_hash(overrides: Option<&str>, profile: &str) -> PyResult<String> {
    Ok(config_from(overrides, profile)?.hash())
}

/// Run one pipeline stage in `run_dir`; returns "ran", "skipped" or "reused".
#[pyfunction]
#[pyo3(signature = (run_dir, stage, overrides=None, profile="default", resume=false))]
fn run_stage(py: Python<'_>, run_dir: &str, stage: &str, overrides: Option<&str>, profile: &str, resume: bool) -> PyResult<String> {
    let cfg = config_from(overrides, profile)?;
    let stage = Stage::from_name(stage).map_err(to_py)?;
    let dir = Path::new(run_dir).to_path_buf();
    let outcome = py
        .detach(move || -> fmrivid::Result<Outcome> { Run::open(&dir, cfg)?.run_stage(stage, resume) })
        .map_err(to_py)?;
    Ok(match outcome {
        Outcome::Ran => "ran",
        Outcome::Skipped => "skipped",
        Outcome::Reused => "reused",
    }
    .to_string())
}

/// SSIM of two `[H, W, C]` images given as flat row-major lists.
#[pyfunction]
#[pyo3(signature = (a, b, shape, dynamic_range=1.0))]
fn ssim_image(a: Vec<f64>, b: Vec<f64>, shape: Vec<usize>, dynamic_range: f64) -> PyResult<f64> {
    let ta = Tensor::new(&shape, a).map_err(to_py)?;
    let tb = Tensor::new(&shape, b).map_err(to_py)?;
    let cfg = SsimConfig {
        dynamic_range,
        ..SsimConfig::default()
    };
    ssim(&ta, &tb, &cfg).map_err(to_py)
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let c = rows.first().map_or(0, Vec::len);
    let n = rows.len();
    Tensor::new(&[n, c], rows.into_iter().flatten().collect()).map_err(to_py)
}

/// N-way top-K success rate of predicted class probabilities.
#[pyfunction]
#[pyo3(signature = (gt_probs, pred_probs, n_way, k=1, trials=100, seed=0))]
fn nway_top_k(gt_probs: Vec<Vec<f64>>, pred_probs: Vec<Vec<f64>>, n_way: usize, k: usize, trials: usize, seed: u64) -> PyResult<f64> {
    nway_topk(&matrix(gt_probs)?, &matrix(pred_probs)?, &NwayConfig::new(n_way, k, trials, seed)).map_err(to_py)
}

/// Two-sided Welch t-test p-value.
#[pyfunction]
fn ablation_p(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    Ok(welch_t_test(&a, &b).map_err(to_py)?.p)
}

#[pymodule]
fn fmrivid_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(run_stage, m)?)?;
    m.add_function(wrap_pyfunction!(ssim_image, m)?)?;
    m.add_function(wrap_pyfunction!(nway_top_k, m)?)?;
    m.add_function(wrap_pyfunction!(ablation_p, m)?)?;
    m.add("STAGES", Stage::ALL.iter().map(|s| s.name()).collect::<Vec<_>>())?;
    Ok(())
}
