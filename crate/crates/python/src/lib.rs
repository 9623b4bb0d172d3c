//! Python bindings: answer parsing, the pipeline over configured backends,
//! scoring, and the RCVE/DLP numerics.
//!
//! Structured values cross the boundary as JSON and come back as plain
//! dicts and lists.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use ddcot_core::backends::BackendConfig;
use ddcot_core::cli::{load_dataset, read_predictions, runtime};
use ddcot_core::eval::{self, DEFAULT_MODEL_TAG};
use ddcot_core::pipeline::{Pipeline, PipelineConfig};
use ddcot_core::rcve::{self, DlpConfig, Matrix, ParamId, RcveDims, RcveInputs, RcveParams};
use ddcot_core::selftest::{run_selftest, SelftestOptions};
use ddcot_core::{parsing, Problem, SubAnswer};

create_exception!(ddcot, DdcotError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    DdcotError::new_err(e.to_string())
}

fn to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: serde::de::DeserializeOwned>(value: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = value.py().import("json")?.call_method1("dumps", (value,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Splits a deconstruction reply into `(sub_question, sub_answer | None)`
/// pairs; `None` marks an uncertain sub-answer.
#[pyfunction]
fn parse_deconstruction(text: &str) -> PyResult<Vec<(String, Option<String>)>> {
    let (items, _) = parsing::parse_deconstruction(text).map_err(err)?;
    Ok(items
        .into_iter()
        .map(|q| {
            let a = match q.sub_answer {
                SubAnswer::Known(t) => Some(t),
                SubAnswer::Uncertain => None,
            };
            (q.sub_question, a)
        })
        .collect())
}

#[pyfunction]
fn is_uncertain(sub_answer: &str) -> bool {
    parsing::is_uncertain(sub_answer)
}

/// Index of the option the answer text commits to.
#[pyfunction]
fn extract_choice(text: &str, choices: Vec<String>) -> Option<usize> {
    parsing::extract_choice(text, &choices)
}

#[pyfunction]
#[pyo3(signature = (candidate, reference, n=4))]
fn bleu(candidate: &str, reference: &str, n: usize) -> PyResult<f64> {
    if n == 0 {
        return Err(PyValueError::new_err("n must be at least 1"));
    }
    Ok(eval::bleu_n(candidate, reference, n))
}

#[pyfunction]
fn rouge_l(candidate: &str, reference: &str) -> f64 {
    eval::rouge_l(candidate, reference)
}

/// Problems from `problems.json` (or `.jsonl`), as dicts.
#[pyfunction]
fn load_problems(py: Python<'_>, path: PathBuf) -> PyResult<Py<PyAny>> {
    let (problems, _) = load_dataset(&path).map_err(err)?;
    to_py(py, &problems)
}

/// Runs the full pipeline on one problem dict.
#[pyfunction]
#[pyo3(signature = (problem, backends, include_caption=true, retries=1))]
fn run_problem(py: Python<'_>, problem: &Bound<'_, PyAny>, backends: PathBuf, include_caption: bool, retries: u32) -> PyResult<Py<PyAny>> {
    let problem: Problem = from_py(problem)?;
    let cfg = BackendConfig::load(&backends).map_err(err)?;
    let (built, _) = cfg.build().map_err(err)?;
    let pcfg = PipelineConfig { include_caption, deconstruction_retries: retries, ..PipelineConfig::default() };
    let pipeline = Pipeline::new(built, pcfg).map_err(err)?;
    let pred = py.detach(|| runtime().block_on(pipeline.run(&problem)));
    to_py(py, &pred)
}

/// Scores a predictions file against a dataset.
#[pyfunction]
#[pyo3(signature = (predictions, dataset, model=None))]
fn score(py: Python<'_>, predictions: PathBuf, dataset: PathBuf, model: Option<String>) -> PyResult<Py<PyAny>> {
    let (problems, _) = load_dataset(&dataset).map_err(err)?;
    let preds = read_predictions(&predictions).map_err(err)?;
    let mut report = eval::score(&preds, &problems).map_err(err)?;
    report.model = model.unwrap_or_else(|| DEFAULT_MODEL_TAG.to_string());
    to_py(py, &report)
}

/// Per-layer prompts wrapped around the visual rows: `[P; V; P]`.
#[pyfunction]
#[pyo3(signature = (visual, layers, prompts_per_layer, layer, seed=0))]
fn dlp_inject(visual: Vec<Vec<f64>>, layers: usize, prompts_per_layer: usize, layer: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    use rand::SeedableRng;
    let v = matrix(visual)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let cfg = DlpConfig::random(layers, prompts_per_layer, v.cols(), rcve::INIT_SCALE, &mut rng).map_err(err)?;
    Ok(rcve::dlp_inject(layer, &v, &cfg).map_err(err)?.to_rows())
}

/// Seeded RCVE module.
#[pyclass(name = "Rcve")]
struct PyRcve {
    params: RcveParams,
}

#[pymethods]
impl PyRcve {
    #[new]
    #[pyo3(signature = (c, n_t, n_v, n_r=16, c_r=4, seed=0))]
    fn new(c: usize, n_t: usize, n_v: usize, n_r: usize, c_r: usize, seed: u64) -> PyResult<Self> {
        let params = RcveParams::seeded(RcveDims::new(c, n_t, n_v, n_r, c_r), seed).map_err(err)?;
        Ok(PyRcve { params })
    }

    /// `N_r×C` compressed visual tokens.
    fn forward(&self, v_g: Vec<Vec<f64>>, text: Vec<Vec<f64>>, v_l: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let inputs = RcveInputs { v_g: matrix(v_g)?, text: matrix(text)?, v_l: matrix(v_l)? };
        Ok(rcve::rcve_forward(&inputs, &self.params).map_err(err)?.to_rows())
    }

    /// Worst relative gap between analytic and central-difference gradients
    /// of `sum(V²)` for one parameter, on seeded random inputs.
    #[pyo3(signature = (param, h=1e-5, seed=0))]
    fn grad_check(&self, param: &str, h: f64, seed: u64) -> PyResult<f64> {
        use rand::SeedableRng;
        let id = ParamId::parse(param).ok_or_else(|| PyValueError::new_err(format!("unknown parameter `{param}`")))?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let inputs = RcveInputs::random(&self.params.dims, 1.0, &mut rng);
        rcve::rcve_grad_check(&inputs, &self.params, id, h).map_err(err)
    }

    #[staticmethod]
    fn parameters() -> Vec<String> {
        ParamId::ALL.iter().map(ToString::to_string).collect()
    }
}

/// Runs the built-in numerical checks; one dict per check.
#[pyfunction]
#[pyo3(signature = (quick=true, seed=0))]
fn selftest(py: Python<'_>, quick: bool, seed: u64) -> PyResult<Py<PyAny>> {
    let results = py.detach(|| run_selftest(&SelftestOptions { quick, seed, ..Default::default() }));
    to_py(py, &results)
}

#[pymodule]
pub fn ddcot(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DdcotError", m.py().get_type::<DdcotError>())?;
    m.add_class::<PyRcve>()?;
    for f in [
        wrap_pyfunction!(parse_deconstruction, m)?,
        wrap_pyfunction!(is_uncertain, m)?,
        wrap_pyfunction!(extract_choice, m)?,
        wrap_pyfunction!(bleu, m)?,
        wrap_pyfunction!(rouge_l, m)?,
        wrap_pyfunction!(load_problems, m)?,
        wrap_pyfunction!(run_problem, m)?,
        wrap_pyfunction!(score, m)?,
        wrap_pyfunction!(dlp_inject, m)?,
        wrap_pyfunction!(selftest, m)?,
    ] {
        m.add_function(f)?;
    }
    Ok(())
}
