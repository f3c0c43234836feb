//! Python bindings: load or train models, rank candidates, evaluate, and
//! query the lexical index.

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use scm_core::data::{generate_synthetic, save_test, save_train, SynthConfig};
use scm_core::experiments::{cmd_eval, cmd_train, EvalOptions};
use scm_core::metrics::EvalReport;
use scm_core::persist::{load_checkpoint, save_checkpoint, RunConfig};
use scm_core::ranking::{select, Model};
use scm_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) => PyValueError::new_err(e.to_string()),
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// A trained ranker with the run configuration it was built from.
#[pyclass(name = "Model", module = "scm_py")]
struct PyModel {
    model: Model,
    config: RunConfig,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (model, config) = load_checkpoint(path).map_err(py_err)?;
        Ok(Self { model, config })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(path, &self.model, &self.config).map_err(py_err)
    }

    #[getter]
    fn tag(&self) -> String {
        self.model.config.tag()
    }

    #[getter]
    fn config(&self) -> String {
        self.config.to_text(false)
    }

    /// Matching degree of each candidate, in input order.
    fn score(&self, turns: Vec<String>, candidates: Vec<String>) -> PyResult<Vec<f64>> {
        Ok(select(&self.model, &turns, &candidates).map_err(py_err)?.degrees)
    }

    /// Candidate indices, best first.
    fn rank(&self, turns: Vec<String>, candidates: Vec<String>) -> PyResult<Vec<usize>> {
        Ok(select(&self.model, &turns, &candidates).map_err(py_err)?.ranking)
    }

    fn __repr__(&self) -> String {
        format!("Model({}, params={})", self.tag(), self.model.store.len())
    }
}

/// BM25 index over a response pool.
#[pyclass(name = "LexicalIndex", module = "scm_py")]
struct PyIndex(scm_core::data::LexicalIndex);

#[pymethods]
impl PyIndex {
    #[new]
    fn new(docs: Vec<String>) -> Self {
        Self(scm_core::data::LexicalIndex::build(docs.iter().map(String::as_str)))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn doc(&self, id: usize) -> PyResult<String> {
        if id >= self.0.len() {
            return Err(PyValueError::new_err(format!("no document {id}")));
        }
        Ok(self.0.doc(id).to_string())
    }

    /// Top `k` `(id, score)` pairs, ties broken by lower id.
    #[pyo3(signature = (text, k, exclude = Vec::new()))]
    fn query(&self, text: &str, k: usize, exclude: Vec<usize>) -> PyResult<Vec<(usize, f64)>> {
        let ex: HashSet<usize> = exclude.into_iter().collect();
        let hits = self.0.query(text, k, &ex).map_err(py_err)?;
        Ok(hits.into_iter().map(|h| (h.id, h.score)).collect())
    }
}

fn report_dict(r: &EvalReport) -> HashMap<String, f64> {
    let mut out: HashMap<String, f64> = r
        .recall
        .iter()
        .map(|x| (format!("R_{}@{}", r.n, x.k), x.value))
        .collect();
    out.insert("MRR".into(), r.mrr);
    out.insert("n".into(), r.n as f64);
    out.insert("samples".into(), r.samples as f64);
    out
}

/// Trains from `key=value` settings (same keys as a config file) and returns
/// the model; writes checkpoints and loss.csv under `out`.
#[pyfunction]
fn train(settings: HashMap<String, String>) -> PyResult<PyModel> {
    let mut pairs: Vec<(String, String)> = settings.into_iter().collect();
    pairs.sort();
    let config = RunConfig::resolve(None, None, &pairs).map_err(py_err)?;
    let out = cmd_train(&config).map_err(py_err)?;
    Ok(PyModel {
        model: out.model,
        config,
    })
}

/// Evaluates a checkpoint; returns metrics keyed like the report table.
#[pyfunction]
#[pyo3(signature = (checkpoint, test, extend = None, adversarial = false, pool = None, seed = 50))]
fn evaluate(
    checkpoint: PathBuf,
    test: PathBuf,
    extend: Option<usize>,
    adversarial: bool,
    pool: Option<PathBuf>,
    seed: u64,
) -> PyResult<HashMap<String, f64>> {
    let opts = EvalOptions {
        extend,
        adversarial,
        pool,
        mined_cache: None,
        seed,
    };
    Ok(report_dict(&cmd_eval(&checkpoint, &test, &opts).map_err(py_err)?))
}

/// Writes `train.tsv` and `test.tsv` into `out`; returns their sizes.
#[pyfunction]
#[pyo3(signature = (out, kind = "separable", seed = 50, n_train = 2000, n_test = 500, m = 10))]
fn synth(out: PathBuf, kind: &str, seed: u64, n_train: usize, n_test: usize, m: usize) -> PyResult<(usize, usize)> {
    let cfg = SynthConfig {
        kind: kind.parse().map_err(py_err)?,
        seed,
        n_train,
        n_test,
        m,
        ..SynthConfig::default()
    };
    let (tr, te) = generate_synthetic(&cfg).map_err(py_err)?;
    std::fs::create_dir_all(&out)?;
    save_train(out.join("train.tsv"), &tr).map_err(py_err)?;
    save_test(out.join("test.tsv"), &te).map_err(py_err)?;
    Ok((tr.len(), te.len()))
}

#[pymodule]
fn scm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyIndex>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    Ok(())
}
