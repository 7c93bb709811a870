//! Python bindings. Structured values cross the boundary as plain dicts and
//! lists; config and scenario arguments accept a dict or a JSON string.

use anastomosis_core::config::GlobalConfig;
use anastomosis_core::controller::{self, run_procedure as run_one, run_seed, ProcedureHooks, Scenario, ScriptedPolicy};
use anastomosis_core::metrics::{self, RunOutcome};
use anastomosis_core::oct::{self, AScan, ClassifierThresholds};
use anastomosis_core::synth::{classify_corpus, gen_corpus, CorpusSpec};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyString;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(runtime_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn json_text(obj: &Bound<'_, PyAny>) -> PyResult<String> {
    if let Ok(s) = obj.cast::<PyString>() {
        return Ok(s.to_str()?.to_owned());
    }
    obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    serde_json::from_str(&json_text(obj)?).map_err(value_err)
}

fn load_config(obj: Option<&Bound<'_, PyAny>>, seed: Option<u64>) -> PyResult<GlobalConfig> {
    let mut cfg = match obj {
        Some(o) => GlobalConfig::from_json_str(&json_text(o)?).map_err(value_err)?,
        None => GlobalConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(value_err)?;
    Ok(cfg)
}

fn load_scenario(obj: Option<&Bound<'_, PyAny>>) -> PyResult<Scenario> {
    obj.map(from_py).transpose().map(Option::unwrap_or_default)
}

/// Default configuration as a dict.
#[pyfunction]
fn default_config(py: Python<'_>) -> PyResult<Py<PyAny>> {
    to_py(py, &GlobalConfig::default())
}

/// Validates a config and returns its content hash.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn config_hash(config: Option<&Bound<'_, PyAny>>) -> PyResult<String> {
    Ok(load_config(config, None)?.hash())
}

/// Runs one procedure with the scripted operator. Returns
/// `{"report": ..., "log": <jsonl text>}`.
#[pyfunction]
#[pyo3(signature = (config=None, seed=None, run=0, scenario=None))]
fn run_procedure(
    py: Python<'_>,
    config: Option<&Bound<'_, PyAny>>,
    seed: Option<u64>,
    run: usize,
    scenario: Option<&Bound<'_, PyAny>>,
) -> PyResult<Py<PyAny>> {
    let cfg = load_config(config, seed)?;
    let sc = load_scenario(scenario)?;
    let out = py
        .detach(|| {
            let seed = run_seed(cfg.seed, run);
            let mut policy = ScriptedPolicy::new(&sc, &cfg, seed);
            run_one(&cfg, run, seed, &sc, &mut policy, ProcedureHooks::default())
        })
        .map_err(runtime_err)?;
    to_py(py, &serde_json::json!({ "report": out.report, "log": out.log_text() }))
}

/// Monte-Carlo batch; returns one report dict per run.
#[pyfunction]
#[pyo3(signature = (runs, config=None, seed=None, scenario=None, threads=1))]
fn simulate(
    py: Python<'_>,
    runs: usize,
    config: Option<&Bound<'_, PyAny>>,
    seed: Option<u64>,
    scenario: Option<&Bound<'_, PyAny>>,
    threads: usize,
) -> PyResult<Py<PyAny>> {
    let cfg = load_config(config, seed)?;
    let sc = load_scenario(scenario)?;
    let outs = py
        .detach(|| controller::simulate_runs(&cfg, runs, &sc, threads))
        .map_err(runtime_err)?;
    let reports: Vec<_> = outs.into_iter().map(|o| o.report).collect();
    to_py(py, &reports)
}

/// Re-executes an event log; returns the three hashes and `matched`.
#[pyfunction]
fn replay(py: Python<'_>, log: &str) -> PyResult<Py<PyAny>> {
    let res = py.detach(|| controller::replay(log)).map_err(value_err)?;
    to_py(py, &res)
}

/// Summary and fixture comparison for a list of run reports.
#[pyfunction]
fn compare(py: Python<'_>, reports: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
    let reports: Vec<controller::ProcedureReport> = from_py(reports)?;
    let runs: Vec<RunOutcome> = reports.iter().filter(|r| r.completed()).map(|r| r.to_run_outcome()).collect();
    let fixtures = metrics::OutcomeFixtures::embedded();
    let report = metrics::compare_report(&runs, Some(&fixtures)).map_err(value_err)?;
    to_py(py, &report)
}

#[pyfunction]
fn cov_percent(values: Vec<f64>) -> PyResult<f64> {
    metrics::cov_percent(&values).map_err(value_err)
}

#[pyfunction]
fn lumen_reduction(anastomosis_id_mm: f64, raw_id_mm: f64) -> PyResult<f64> {
    metrics::lumen_reduction(anastomosis_id_mm, raw_id_mm).map_err(value_err)
}

#[pyfunction]
fn anova_oneway(py: Python<'_>, groups: Vec<Vec<f64>>) -> PyResult<Py<PyAny>> {
    to_py(py, &metrics::anova_oneway(&groups).map_err(value_err)?)
}

#[pyfunction]
fn tukey_hsd(py: Python<'_>, groups: Vec<Vec<f64>>) -> PyResult<Py<PyAny>> {
    to_py(py, &metrics::tukey_hsd(&groups).map_err(value_err)?)
}

/// Studentized-range critical value at alpha 0.05.
#[pyfunction]
fn q_critical_05(k: usize, df: usize) -> PyResult<f64> {
    Ok(metrics::q_critical_05(k, df).map_err(value_err)?.q)
}

/// Labels an A-scan as air, tissue or nitinol against the tissue template
/// extracted from `reference`.
#[pyfunction]
#[pyo3(signature = (samples, reference, depth_per_sample=oct::DEFAULT_DEPTH_PER_SAMPLE_MM))]
fn classify_ascan(samples: Vec<f64>, reference: Vec<f64>, depth_per_sample: f64) -> PyResult<&'static str> {
    let thr = ClassifierThresholds::default();
    let scan = AScan::new(samples, depth_per_sample, 0.0).map_err(value_err)?;
    let reference = AScan::new(reference, depth_per_sample, 0.0).map_err(value_err)?;
    let template = oct::extract_template(&reference, &thr).map_err(value_err)?;
    Ok(oct::classify(&scan, &template, &thr).map_err(value_err)?.as_str())
}

/// Generates the labeled corpus in memory and classifies it; returns
/// accuracy and the confusion matrix.
#[pyfunction]
#[pyo3(signature = (noise_level, seed=0))]
fn corpus_accuracy(py: Python<'_>, noise_level: f64, seed: u64) -> PyResult<Py<PyAny>> {
    let (labels, summary) = py
        .detach(|| {
            let corpus = gen_corpus(&CorpusSpec::standard(noise_level), seed)?;
            classify_corpus(&corpus, &ClassifierThresholds::default())
        })
        .map_err(value_err)?;
    let labels: Vec<&str> = labels.iter().map(|m| m.as_str()).collect();
    to_py(
        py,
        &serde_json::json!({ "accuracy": summary.accuracy(), "matrix": summary.matrix, "labels": labels }),
    )
}

#[pymodule]
fn anastomosis(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(run_procedure, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(cov_percent, m)?)?;
    m.add_function(wrap_pyfunction!(lumen_reduction, m)?)?;
    m.add_function(wrap_pyfunction!(anova_oneway, m)?)?;
    m.add_function(wrap_pyfunction!(tukey_hsd, m)?)?;
    m.add_function(wrap_pyfunction!(q_critical_05, m)?)?;
    m.add_function(wrap_pyfunction!(classify_ascan, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_accuracy, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
