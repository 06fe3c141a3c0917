//! Python bindings: metrics, Fisher's exact test, and the audit pipeline.

use std::path::PathBuf;

use granaudit::audit::{self, AuditConfig, RunOptions, StageStatus};
use granaudit::distshift::{fisher_exact as fisher, Table2x2};
use granaudit::metrics::{self, ScoredLabels};
use granaudit::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e.kind() {
        granaudit::ErrorKind::Numerical => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn scored<'a>(scores: &'a [f64], labels: &'a [u8]) -> PyResult<ScoredLabels<'a>> {
    ScoredLabels::new(scores, labels).map_err(to_py)
}

#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    Ok(metrics::auroc(&scored(&scores, &labels)?).map_err(to_py)?.value)
}

/// Average precision with tied scores treated as one threshold.
#[pyfunction]
fn auprc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    Ok(metrics::auprc(&scored(&scores, &labels)?).map_err(to_py)?.value)
}

#[pyfunction]
fn fpr(scores: Vec<f64>, labels: Vec<u8>, threshold: f64) -> PyResult<f64> {
    Ok(metrics::fpr(&scored(&scores, &labels)?, threshold).map_err(to_py)?.value)
}

#[pyfunction]
fn fnr(scores: Vec<f64>, labels: Vec<u8>, threshold: f64) -> PyResult<f64> {
    Ok(metrics::fnr(&scored(&scores, &labels)?, threshold).map_err(to_py)?.value)
}

/// Ten equal-width bins, unweighted mean over all bins.
#[pyfunction]
fn ece(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    Ok(metrics::ece_10bin(&scored(&scores, &labels)?).map_err(to_py)?.value)
}

/// Two-sided p-value for [[a, b], [c, d]].
#[pyfunction]
fn fisher_exact(a: u64, b: u64, c: u64, d: u64) -> f64 {
    fisher(&Table2x2::new(a, b, c, d))
}

/// Run the audit in `config`; returns (stage, "ran" | "skipped") pairs.
#[pyfunction]
#[pyo3(signature = (config, force = false, seed = None))]
fn run_audit(py: Python<'_>, config: PathBuf, force: bool, seed: Option<u64>) -> PyResult<Vec<(String, String)>> {
    let mut cfg = AuditConfig::load(&config).map_err(to_py)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let summary = py
        .detach(|| audit::run_audit(&cfg, &RunOptions { force }))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(summary
        .stages
        .into_iter()
        .map(|s| {
            let status = match s.status {
                StageStatus::Ran => "ran",
                StageStatus::Skipped => "skipped",
            };
            (s.name, status.to_string())
        })
        .collect())
}

/// Figure data as CSV text from a finished report.
#[pyfunction]
#[pyo3(signature = (config, figure, model = None))]
fn emit_figure(config: PathBuf, figure: &str, model: Option<String>) -> PyResult<String> {
    let cfg = AuditConfig::load(&config).map_err(to_py)?;
    let model = model.or_else(|| cfg.models.first().map(|m| m.name.clone()));
    audit::emit_figure(&cfg.output_path(), figure, model.as_deref()).map_err(to_py)
}

#[pymodule]
fn pygranaudit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(auprc, m)?)?;
    m.add_function(wrap_pyfunction!(fpr, m)?)?;
    m.add_function(wrap_pyfunction!(fnr, m)?)?;
    m.add_function(wrap_pyfunction!(ece, m)?)?;
    m.add_function(wrap_pyfunction!(fisher_exact, m)?)?;
    m.add_function(wrap_pyfunction!(run_audit, m)?)?;
    m.add_function(wrap_pyfunction!(emit_figure, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
