//! Python bindings: synthetic data, ensembles, edge artifacts, simulation,
//! the full in-process stack, the broker and the record store.

use std::path::PathBuf;
use std::sync::Mutex;

use irrigo_cli::pipeline::{self, need_split, Dataset, Task};
use irrigo_cli::stack::{self, Outage, StackOptions};
use irrigo_core::edgenode::Mode;
use irrigo_core::ensemble::{EnsembleKind, Hyperparams, TreeEnsembleModel};
use irrigo_core::fieldsim::{self, sim_node_config, Policy, ScenarioConfig};
use irrigo_core::synthdata::{generate as synth_generate, summarize as synth_summarize, GeneratorConfig};
use irrigo_core::telemetry::{dryness_pct as core_dryness_pct, CalibrationProfile};
use irrigo_core::tinymodel::{self, QuantMode};
use irrigo_mqtt::{BrokerLimits, StandaloneBroker};
use irrigo_server::{Query, RecordKind, StoreOptions, StoreRecord};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use serde::Serialize;

/// Rows of the water model trained when a simulation needs one.
const SIM_MODEL_ROWS: usize = 8000;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Serializes through JSON into plain Python dicts and lists.
fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn config(n_rows: usize, seed: u64) -> GeneratorConfig {
    GeneratorConfig { n_rows, seed, ..GeneratorConfig::default() }
}

fn hyperparams(overrides: Option<Vec<String>>) -> PyResult<Hyperparams> {
    let mut hp = Hyperparams::default();
    for o in overrides.unwrap_or_default() {
        hp = hp.with_override(&o).map_err(err)?;
    }
    hp.validate().map_err(err)?;
    Ok(hp)
}

fn parse_mode(policy: &str) -> PyResult<Mode> {
    match policy {
        "model" => Ok(Mode::Model),
        "rule" => Ok(Mode::Rule),
        other => Err(PyValueError::new_err(format!("unknown node policy {other:?}, expected model or rule"))),
    }
}

fn scenario(days: f64) -> PyResult<ScenarioConfig> {
    let s = ScenarioConfig { duration_days: days, ..ScenarioConfig::default() };
    s.validate().map_err(PyValueError::new_err)?;
    Ok(s)
}

fn node_model(mode: Mode, model: Option<&EdgeModel>, seed: u64) -> PyResult<Option<tinymodel::EdgeModel>> {
    Ok(match (mode, model) {
        (Mode::Rule, _) => None,
        (Mode::Model, Some(m)) => Some(m.inner.clone()),
        (Mode::Model, None) => {
            let m = pipeline::train_water_model(SIM_MODEL_ROWS, seed).map_err(err)?;
            Some(tinymodel::load(&tinymodel::export(&m).map_err(err)?).map_err(err)?)
        }
    })
}

/// Dryness percent of a raw soil reading under the default calibration.
#[pyfunction]
fn dryness_pct(soil_adc: f64) -> i32 {
    core_dryness_pct(soil_adc, &CalibrationProfile::default())
}

/// Synthetic dataset rows as dicts.
#[pyfunction]
#[pyo3(signature = (n_rows=30001, seed=7))]
fn generate(py: Python<'_>, n_rows: usize, seed: u64) -> PyResult<Bound<'_, PyAny>> {
    to_py(py, &synth_generate(&config(n_rows, seed)).map_err(err)?)
}

/// Column statistics of a synthetic dataset.
#[pyfunction]
#[pyo3(signature = (n_rows=30001, seed=7))]
fn summarize(py: Python<'_>, n_rows: usize, seed: u64) -> PyResult<Bound<'_, PyAny>> {
    let rows = synth_generate(&config(n_rows, seed)).map_err(err)?;
    to_py(py, &synth_summarize(&rows).map_err(err)?)
}

/// Trains both ensembles on the need task and returns the comparison report.
#[pyfunction]
#[pyo3(signature = (n_rows=30001, seed=7, hp=None))]
fn compare(py: Python<'_>, n_rows: usize, seed: u64, hp: Option<Vec<String>>) -> PyResult<Bound<'_, PyAny>> {
    let hp = hyperparams(hp)?;
    let (train_set, test_set) = py.detach(|| need_split(&config(n_rows, seed))).map_err(err)?;
    let c = py.detach(|| pipeline::compare(&train_set, &test_set, &hp, seed, Task::Need)).map_err(err)?;
    to_py(py, &c.report)
}

/// A trained tree ensemble.
#[pyclass(frozen, module = "irrigo")]
struct Model {
    inner: TreeEnsembleModel,
}

#[pymethods]
impl Model {
    /// Trains on the synthetic dataset for `task` ("need" or "water") with
    /// `kind` "rf" or "gb".
    #[staticmethod]
    #[pyo3(signature = (task="need", kind="gb", n_rows=30001, seed=7, hp=None))]
    fn train(py: Python<'_>, task: &str, kind: &str, n_rows: usize, seed: u64, hp: Option<Vec<String>>) -> PyResult<Self> {
        let task: Task = task.parse().map_err(err)?;
        let kind = match kind {
            "rf" => EnsembleKind::Forest,
            "gb" => EnsembleKind::Boosting,
            other => return Err(PyValueError::new_err(format!("unknown kind {other:?}, expected rf or gb"))),
        };
        let hp = hyperparams(hp)?;
        let inner = py
            .detach(|| {
                let cfg = config(n_rows, seed);
                let (train_rows, _) = pipeline::synth_split(&cfg)?;
                let data = Dataset::build(&train_rows, task, cfg.row_interval_ms)?;
                pipeline::train(kind, &data, &hp, seed, task)
            })
            .map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: serde_json::from_str(text).map_err(err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(err)
    }

    fn predict(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        rows.iter().map(|r| self.inner.predict(r).map_err(err)).collect()
    }

    /// TML1 edge artifact.
    fn export<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &tinymodel::export(&self.inner).map_err(err)?))
    }

    /// (feature, importance) pairs, most important first.
    fn importance(&self) -> Vec<(String, f64)> {
        self.inner.importance_ranking()
    }

    #[getter]
    fn kind(&self) -> &'static str {
        match self.inner.kind {
            EnsembleKind::Forest => "rf",
            EnsembleKind::Boosting => "gb",
        }
    }

    #[getter]
    fn n_trees(&self) -> usize {
        self.inner.trees.len()
    }

    #[getter]
    fn feature_names(&self) -> Vec<String> {
        self.inner.feature_names.clone()
    }

    fn __repr__(&self) -> String {
        format!("Model(kind={:?}, n_trees={})", self.kind(), self.n_trees())
    }
}

/// A loaded TML1 artifact, as the node runs it.
#[pyclass(frozen, module = "irrigo")]
struct EdgeModel {
    inner: tinymodel::EdgeModel,
}

#[pymethods]
impl EdgeModel {
    #[new]
    fn new(artifact: &[u8]) -> PyResult<Self> {
        Ok(Self { inner: tinymodel::load(artifact).map_err(err)? })
    }

    fn infer(&self, row: Vec<f64>) -> PyResult<f64> {
        self.inner.infer(&row).map_err(err)
    }

    fn infer_many(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        rows.iter().map(|r| self.inner.infer(r).map_err(err)).collect()
    }

    /// Header and per-tree statistics.
    fn info<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.info())
    }

    #[getter]
    fn n_features(&self) -> usize {
        self.inner.n_features()
    }
}

/// Re-encodes a float artifact with "f16" or "i16" nodes.
#[pyfunction]
fn quantize<'py>(py: Python<'py>, artifact: &[u8], mode: &str) -> PyResult<Bound<'py, PyBytes>> {
    let mode: QuantMode = mode.parse().map_err(err)?;
    Ok(PyBytes::new(py, &tinymodel::quantize(artifact, mode).map_err(err)?))
}

/// Closed-loop water report for "model", "rule" or "timer".
#[pyfunction]
#[pyo3(signature = (policy="model", days=14.0, seed=7, model=None))]
fn simulate<'py>(py: Python<'py>, policy: &str, days: f64, seed: u64, model: Option<PyRef<'py, EdgeModel>>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = scenario(days)?;
    let policy = match policy {
        "timer" => Policy::timer(),
        p => {
            let mode = parse_mode(p)?;
            let model = node_model(mode, model.as_deref(), seed)?;
            Policy::Node { cfg: Box::new(sim_node_config(mode, &cfg)), model }
        }
    };
    let run = py.detach(|| fieldsim::run_policy(&policy, &cfg, seed)).map_err(err)?;
    to_py(py, &run.report)
}

/// Runs broker, server and node in process and returns the stack report.
/// `data_dir` must be empty or missing.
#[pyfunction]
#[pyo3(signature = (data_dir, policy="model", days=14.0, seed=7, model=None, kill_at=None, restart_at=None))]
#[allow(clippy::too_many_arguments)]
fn run_stack<'py>(
    py: Python<'py>,
    data_dir: PathBuf,
    policy: &str,
    days: f64,
    seed: u64,
    model: Option<PyRef<'py, EdgeModel>>,
    kill_at: Option<f64>,
    restart_at: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let mode = parse_mode(policy)?;
    let outage = match (kill_at, restart_at) {
        (Some(kill_at), Some(restart_at)) => Some(Outage { kill_at, restart_at }),
        (None, None) => None,
        _ => return Err(PyValueError::new_err("kill_at and restart_at go together")),
    };
    let opts = StackOptions {
        scenario: scenario(days)?,
        seed,
        outage,
        ..StackOptions::new(mode, node_model(mode, model.as_deref(), seed)?, data_dir)
    };
    let run = py.detach(|| stack::run_stack(&opts)).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py(py, &run.report)
}

/// MQTT filter match; raises on an invalid filter or topic name.
#[pyfunction]
fn topic_matches(filter: &str, topic: &str) -> PyResult<bool> {
    irrigo_mqtt::topic_matches(filter, topic).map_err(err)
}

/// The MQTT broker on its own runtime.
#[pyclass(module = "irrigo")]
struct Broker {
    inner: Option<StandaloneBroker>,
}

impl Broker {
    fn running(&self) -> PyResult<&StandaloneBroker> {
        self.inner.as_ref().ok_or_else(|| PyRuntimeError::new_err("broker stopped"))
    }
}

#[pymethods]
impl Broker {
    #[new]
    #[pyo3(signature = (addr="127.0.0.1:0"))]
    fn new(addr: &str) -> PyResult<Self> {
        let b = StandaloneBroker::start(addr, BrokerLimits::default()).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(Self { inner: Some(b) })
    }

    /// "host:port" the broker listens on.
    #[getter]
    fn address(&self) -> PyResult<String> {
        Ok(self.running()?.local_addr().to_string())
    }

    fn retained<'py>(&self, py: Python<'py>, topic: &str) -> PyResult<Option<Bound<'py, PyBytes>>> {
        Ok(self.running()?.handle().retained_payload(topic).map(|p| PyBytes::new(py, &p)))
    }

    fn connection_count(&self) -> PyResult<usize> {
        Ok(self.running()?.handle().connection_count())
    }

    fn stop(&mut self) {
        if let Some(b) = self.inner.take() {
            b.kill();
        }
    }
}

/// The append-only record store.
#[pyclass(module = "irrigo")]
struct Store {
    inner: Mutex<irrigo_server::Store>,
}

fn record_kind(kind: &str) -> PyResult<RecordKind> {
    serde_json::from_value(serde_json::Value::String(kind.into()))
        .map_err(|_| PyValueError::new_err(format!("unknown record kind {kind:?}")))
}

#[pymethods]
impl Store {
    #[new]
    fn new(path: PathBuf) -> PyResult<Self> {
        let s = irrigo_server::Store::open(StoreOptions::new(path)).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(Self { inner: Mutex::new(s) })
    }

    /// Appends one record; `payload` is any JSON-serializable object.
    /// Returns the stored record.
    fn append<'py>(&self, py: Python<'py>, kind: &str, node: &str, ts: i64, payload: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
        let text: String = py.import("json")?.call_method1("dumps", (payload,))?.extract()?;
        let payload: serde_json::Value = serde_json::from_str(&text).map_err(err)?;
        let rec = StoreRecord::new(record_kind(kind)?, node, ts, irrigo_server::now_ms(), payload);
        let stored = self.inner.lock().expect("store lock").append(rec).map_err(err)?;
        to_py(py, &stored)
    }

    #[pyo3(signature = (node, kind=None))]
    fn query<'py>(&self, py: Python<'py>, node: &str, kind: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
        let mut q = Query::new(node);
        if let Some(k) = kind {
            q = q.kind(record_kind(k)?);
        }
        let records = self.inner.lock().expect("store lock").query(&q).map_err(err)?;
        to_py(py, &records)
    }

    /// What the open-time scan found.
    fn recovery<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.inner.lock().expect("store lock").recovery())
    }

    fn __len__(&self) -> usize {
        self.inner.lock().expect("store lock").record_count()
    }
}

#[pymodule]
fn irrigo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(dryness_pct, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_stack, m)?)?;
    m.add_function(wrap_pyfunction!(topic_matches, m)?)?;
    m.add_class::<Model>()?;
    m.add_class::<EdgeModel>()?;
    m.add_class::<Broker>()?;
    m.add_class::<Store>()?;
    Ok(())
}
