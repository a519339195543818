//! Python module `coalrec`: datasets, training, evaluation and the
//! coalition-game primitives.

use std::path::PathBuf;

use coalrec::data::{Dataset, Interaction, PaddedSequence};
use coalrec::eval::{evaluate, Metrics, Target};
use coalrec::game::{self, CharTable, Coalition, GammaState};
use coalrec::synth::{generate, SynthProfile};
use coalrec::train::{eval_setup, fit, Checkpoint, FitResult, TrainConfig, Variant};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde::Serialize;
use serde_json::Value;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => u.into_pyobject(py)?.into_any(),
            (None, Some(i)) => i.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(xs) => {
            let items = xs.iter().map(|x| json_to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any()
        }
        Value::Object(map) => {
            let d = PyDict::new(py);
            for (k, x) in map {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn to_py<'py, T: Serialize>(py: Python<'py>, x: &T) -> PyResult<Bound<'py, PyAny>> {
    json_to_py(py, &serde_json::to_value(x).map_err(runtime_err)?)
}

fn parse_target(target: &str) -> PyResult<Target> {
    match target {
        "test" => Ok(Target::Test),
        "valid" => Ok(Target::Valid),
        other => Err(value_err(format!("unknown target `{other}`"))),
    }
}

/// Resolved per-user sequences plus their hierarchy.
#[pyclass(name = "Dataset", module = "coalrec")]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// Load a tab-separated event log and a JSON manifest.
    #[staticmethod]
    fn load(events: PathBuf, manifest: PathBuf) -> PyResult<Self> {
        Dataset::load(&events, &manifest)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    /// Generate a synthetic dataset. `profile` is a TOML table of overrides
    /// on the default three-domain profile, e.g. `"users = 500\nseed = 3"`.
    #[staticmethod]
    #[pyo3(signature = (profile = ""))]
    fn synthetic(profile: &str) -> PyResult<Self> {
        let p: SynthProfile = toml_from(profile)?;
        generate(&p).map(|inner| Self { inner }).map_err(value_err)
    }

    #[getter]
    fn users(&self) -> usize {
        self.inner.sequences.len()
    }

    #[getter]
    fn events(&self) -> usize {
        self.inner.sequences.iter().map(|s| s.len()).sum()
    }

    #[getter]
    fn domains(&self) -> Vec<String> {
        self.inner.vocab.domain_names().to_vec()
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.vocab.depth()
    }

    /// `(user_id, [(domain, item_id, timestamp), ...])` for user `index`.
    fn sequence(&self, index: usize) -> PyResult<(String, Vec<(usize, u32, i64)>)> {
        let s = self
            .inner
            .sequences
            .get(index)
            .ok_or_else(|| value_err(format!("no user at index {index}")))?;
        Ok((
            s.user_id.clone(),
            s.items.iter().map(|i| (i.domain, i.item_id(), i.timestamp)).collect(),
        ))
    }

    fn __len__(&self) -> usize {
        self.inner.sequences.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(users={}, events={}, domains={:?})",
            self.users(),
            self.events(),
            self.domains()
        )
    }
}

fn toml_from<T: serde::de::DeserializeOwned>(text: &str) -> PyResult<T> {
    toml_value(text).and_then(|v| T::deserialize(v).map_err(value_err))
}

fn toml_value(text: &str) -> PyResult<toml::Value> {
    text.parse::<toml::Table>().map(toml::Value::Table).map_err(value_err)
}

/// Training hyperparameters.
#[pyclass(name = "TrainConfig", module = "coalrec", get_all, set_all, skip_from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    max_len: usize,
    dim: usize,
    layers: usize,
    heads: usize,
    dropout: f64,
    batch_size: usize,
    epochs: usize,
    lr: f64,
    variant: String,
    alpha: f64,
    beta: f64,
    lambda_: f64,
    normalize_value: bool,
    eval_negatives: usize,
    seed: u64,
}

impl From<TrainConfig> for PyTrainConfig {
    fn from(c: TrainConfig) -> Self {
        Self {
            max_len: c.max_len,
            dim: c.dim,
            layers: c.layers,
            heads: c.heads,
            dropout: c.dropout,
            batch_size: c.batch_size,
            epochs: c.epochs,
            lr: c.lr,
            variant: c.variant.to_string(),
            alpha: c.alpha,
            beta: c.beta,
            lambda_: c.lambda,
            normalize_value: c.normalize_value,
            eval_negatives: c.eval_negatives,
            seed: c.seed,
        }
    }
}

impl PyTrainConfig {
    fn to_core(&self) -> PyResult<TrainConfig> {
        Ok(TrainConfig {
            max_len: self.max_len,
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            dropout: self.dropout,
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr: self.lr,
            variant: self.variant.parse::<Variant>().map_err(value_err)?,
            alpha: self.alpha,
            beta: self.beta,
            lambda: self.lambda_,
            normalize_value: self.normalize_value,
            eval_negatives: self.eval_negatives,
            seed: self.seed,
        })
    }
}

#[pymethods]
impl PyTrainConfig {
    /// Defaults, with any field overridden by keyword (`lambda_` for λ).
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut cfg = PyTrainConfig::from(TrainConfig::default());
        if let Some(kw) = kwargs {
            let this = Bound::new(kw.py(), cfg.clone())?;
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                if !this.hasattr(key.as_str())? {
                    return Err(value_err(format!("unknown TrainConfig field `{key}`")));
                }
                this.setattr(key.as_str(), v)?;
            }
            cfg = this.borrow().clone();
        }
        cfg.to_core()?;
        Ok(cfg)
    }

    fn __repr__(&self) -> String {
        format!(
            "TrainConfig(variant={:?}, epochs={}, dim={}, layers={}, heads={}, lr={}, lambda_={}, seed={})",
            self.variant, self.epochs, self.dim, self.layers, self.heads, self.lr, self.lambda_, self.seed
        )
    }
}

/// Outcome of [`fit`]: selected checkpoint, logs and γ trajectory.
#[pyclass(name = "FitResult", module = "coalrec")]
struct PyFitResult {
    inner: FitResult,
}

#[pymethods]
impl PyFitResult {
    #[getter]
    fn best_epoch(&self) -> usize {
        self.inner.best.epoch
    }

    #[getter]
    fn final_gamma(&self) -> Vec<f64> {
        self.inner.final_gamma.clone()
    }

    #[getter]
    fn refreshes(&self) -> usize {
        self.inner.refreshes
    }

    /// `[(step, [γ_1..γ_D]), ...]`.
    #[getter]
    fn gamma_trajectory(&self) -> Vec<(usize, Vec<f64>)> {
        self.inner.trajectory.rows.clone()
    }

    #[getter]
    fn epochs<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.epochs)
    }

    #[getter]
    fn best_valid<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.best_valid)
    }

    /// Metrics of the selected model on `"test"` or `"valid"` targets.
    #[pyo3(signature = (dataset, target = "test"))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset, target: &str) -> PyResult<Bound<'py, PyAny>> {
        let ck = &self.inner.best;
        ck.check_vocab(&dataset.inner.vocab).map_err(value_err)?;
        let report = evaluate(
            &ck.model,
            &dataset.inner.vocab,
            &self.inner.splits,
            parse_target(target)?,
            &eval_setup(&ck.config),
        )
        .map_err(runtime_err)?;
        to_py(py, &report)
    }

    /// Write the selected checkpoint as JSON.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.best.save(&path).map_err(runtime_err)
    }
}

/// Train a model; blocks until finished.
#[pyfunction]
fn train(py: Python<'_>, dataset: &PyDataset, config: &PyTrainConfig) -> PyResult<PyFitResult> {
    let cfg = config.to_core()?;
    let ds = &dataset.inner;
    py.detach(|| fit(ds, &cfg))
        .map(|inner| PyFitResult { inner })
        .map_err(runtime_err)
}

/// Evaluate a saved checkpoint on `dataset`.
#[pyfunction]
#[pyo3(signature = (checkpoint, dataset, target = "test"))]
fn evaluate_checkpoint<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    dataset: &PyDataset,
    target: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let ck = Checkpoint::load(&checkpoint).map_err(value_err)?;
    ck.check_vocab(&dataset.inner.vocab).map_err(value_err)?;
    let (splits, _) = coalrec::data::split_all(&dataset.inner.sequences);
    let report = evaluate(&ck.model, &dataset.inner.vocab, &splits, parse_target(target)?, &eval_setup(&ck.config))
        .map_err(runtime_err)?;
    to_py(py, &report)
}

/// Exact Shapley values of a game given `v` in bitmask order (`len = 2^D`).
#[pyfunction]
fn shapley_exact(values: Vec<f64>) -> PyResult<Vec<f64>> {
    let n = values.len().trailing_zeros() as usize;
    if values.len() != 1 << n {
        return Err(value_err("length of values must be a power of two"));
    }
    let table = CharTable::from_values(n, &values).map_err(value_err)?;
    game::shapley_exact(&table).map_err(value_err)
}

/// Mask a sequence of domain tags (None = PAD) to the 0-based `members`.
/// Returns the masked tags and the recomputed target mask.
#[pyfunction]
fn mask_coalition(domains: Vec<Option<usize>>, members: Vec<usize>) -> (Vec<Option<usize>>, Vec<bool>) {
    let tokens = domains
        .iter()
        .enumerate()
        .map(|(i, d)| {
            d.map(|domain| Interaction {
                domain,
                categories: vec![i as u32 + 1],
                timestamp: i as i64,
            })
        })
        .collect();
    let masked = game::mask_coalition(&PaddedSequence::from_tokens(tokens), Coalition::from_members(&members));
    (
        masked.tokens.iter().map(|t| t.as_ref().map(|i| i.domain)).collect(),
        masked.target_mask,
    )
}

/// One step `raw ← α·raw + β·φ`; returns `(raw, softmax(raw/λ))`.
#[pyfunction]
#[pyo3(signature = (raw, phi, alpha = 0.7, beta = 0.3, lambda_ = 1.0))]
fn update_gamma(raw: Vec<f64>, phi: Vec<f64>, alpha: f64, beta: f64, lambda_: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    if !(lambda_ > 0.0) {
        return Err(value_err("lambda_ must be positive"));
    }
    let mut state = GammaState {
        raw,
        alpha,
        beta,
        lambda: lambda_,
    };
    let gamma = game::update_gamma(&mut state, &phi).map_err(value_err)?;
    Ok((state.raw, gamma))
}

/// HR@5/10, NDCG@5/10 and MRR of a list of 1-based ranks.
#[pyfunction]
fn metrics_from_ranks<'py>(py: Python<'py>, ranks: Vec<usize>) -> PyResult<Bound<'py, PyAny>> {
    if ranks.contains(&0) {
        return Err(value_err("ranks are 1-based"));
    }
    to_py(py, &Metrics::from_ranks(ranks))
}

#[pymodule]
#[pyo3(name = "coalrec")]
fn coalrec_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyFitResult>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(shapley_exact, m)?)?;
    m.add_function(wrap_pyfunction!(mask_coalition, m)?)?;
    m.add_function(wrap_pyfunction!(update_gamma, m)?)?;
    m.add_function(wrap_pyfunction!(metrics_from_ranks, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
