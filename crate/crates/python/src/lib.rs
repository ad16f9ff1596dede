//! Python bindings: scenario runs, metrics, the loss primitives and the
//! gradient-check suites.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fedhpro::experiment::{collect_run_dirs, compare_runs, write_cell, Experiment, Overrides};
use fedhpro::gradcheck::{run_suite, GradcheckConfig, Suite};
use fedhpro::hyperproto::{self, HyperPrototypes};
use fedhpro::losses;
use fedhpro::metrics::{records_to_csv, RoundRecord};
use fedhpro::numerics::Matrix;
use fedhpro::prototypes::LocalPrototypes;
use fedhpro::{FedError, FederationOutcome, Strategy};

fn py_err(e: FedError) -> PyErr {
    match e {
        FedError::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(py_err)
}

fn record_dict<'py>(py: Python<'py>, r: &RoundRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("round", r.round)?;
    d.set_item("participants", r.participants)?;
    d.set_item("train_ce", r.train_ce)?;
    d.set_item("train_hpcl", r.train_hpcl)?;
    d.set_item("train_hpal", r.train_hpal)?;
    d.set_item("train_proto", r.train_proto)?;
    d.set_item("gm_loss_start", r.gm_loss_start)?;
    d.set_item("gm_loss", r.gm_loss)?;
    d.set_item("test_acc", r.test_accuracy)?;
    d.set_item("domain_acc", r.domain_accuracy.clone())?;
    d.set_item("fair_mean", r.fairness.mean)?;
    d.set_item("fair_worst", r.fairness.worst)?;
    d.set_item("fair_best", r.fairness.best)?;
    d.set_item("fair_var", r.fairness.variance)?;
    d.set_item("proto_l2", r.proto_l2.clone())?;
    d.set_item("hyper_l2", r.hyper_l2.clone())?;
    d.set_item("proto_l2_mean", r.proto_l2_mean)?;
    d.set_item("hyper_l2_mean", r.hyper_l2_mean)?;
    Ok(d)
}

/// A resolved scenario. `config` is TOML text with the same keys as a
/// `--config` file; keyword arguments win over it.
#[pyclass(module = "pyfedhpro", frozen)]
struct Scenario {
    exp: Experiment,
}

#[pymethods]
impl Scenario {
    #[new]
    #[pyo3(signature = (preset="nid1", *, alpha=None, rho=None, rounds=None, clients=None, epochs=None, config=None))]
    fn new(
        preset: &str,
        alpha: Option<f64>,
        rho: Option<f64>,
        rounds: Option<usize>,
        clients: Option<usize>,
        epochs: Option<usize>,
        config: Option<&str>,
    ) -> PyResult<Self> {
        let file = match config {
            Some(text) => Overrides::from_toml_str(text).map_err(py_err)?,
            None => Overrides::default(),
        };
        let top = Overrides {
            preset: Some(preset.to_string()),
            alpha,
            rho,
            rounds,
            clients,
            epochs,
            ..Overrides::default()
        };
        let exp = top.over(file).resolve().map_err(py_err)?;
        Ok(Scenario { exp })
    }

    #[getter]
    fn tag(&self) -> String {
        self.exp.tag()
    }

    #[getter]
    fn clients(&self) -> usize {
        self.exp.clients
    }

    #[getter]
    fn rounds(&self) -> usize {
        self.exp.federation.rounds
    }

    /// Effective configuration of one cell as a JSON string.
    #[pyo3(signature = (strategy="fedhpro", seed=1))]
    fn config_json(&self, strategy: &str, seed: u64) -> PyResult<String> {
        let s: Strategy = strategy.parse().map_err(py_err)?;
        Ok(self.exp.echo(s, seed).to_string())
    }

    /// Client shards and the test set as `(features, labels)` pairs.
    #[allow(clippy::type_complexity)]
    fn dataset(&self, seed: u64) -> PyResult<(Vec<(Vec<Vec<f64>>, Vec<usize>)>, (Vec<Vec<f64>>, Vec<usize>))> {
        let data = self.exp.build_data(seed).map_err(py_err)?;
        let split = |ds: &fedhpro::data::LabeledDataset| {
            let x = (0..ds.len()).map(|i| ds.x(i).to_vec()).collect();
            (x, ds.labels().to_vec())
        };
        Ok((data.clients.iter().map(split).collect(), split(&data.test)))
    }

    /// Runs one (strategy, seed) cell with the GIL released.
    #[pyo3(signature = (strategy, seed, workers=1))]
    fn run(&self, py: Python<'_>, strategy: &str, seed: u64, workers: usize) -> PyResult<RunResult> {
        let s: Strategy = strategy.parse().map_err(py_err)?;
        let exp = self.exp.clone();
        let outcome = py
            .detach(move || exp.run_cell(s, seed, workers, |_| {}))
            .map_err(py_err)?;
        Ok(RunResult {
            exp: self.exp.clone(),
            strategy: s,
            seed,
            outcome,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Scenario('{}', clients={}, rounds={}, epochs={})",
            self.exp.tag(),
            self.exp.clients,
            self.exp.federation.rounds,
            self.exp.federation.local_epochs
        )
    }
}

#[pyclass(module = "pyfedhpro", frozen)]
struct RunResult {
    exp: Experiment,
    strategy: Strategy,
    seed: u64,
    outcome: FederationOutcome,
}

#[pymethods]
impl RunResult {
    #[getter]
    fn strategy(&self) -> &'static str {
        self.strategy.name()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.seed
    }

    #[getter]
    fn final_accuracy(&self) -> f64 {
        self.outcome.records.last().map_or(f64::NAN, |r| r.test_accuracy)
    }

    #[getter]
    fn class_accuracy(&self) -> Vec<Option<f64>> {
        self.outcome.evaluation.class_accuracy()
    }

    fn records<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.outcome.records.iter().map(|r| record_dict(py, r)).collect()
    }

    /// The `metrics.csv` text, byte-identical to what `write` produces.
    fn metrics_csv(&self) -> PyResult<String> {
        records_to_csv(&self.outcome.records).map_err(py_err)
    }

    /// Hyper-prototype banks as `classes × bank_size × dim` nested lists.
    fn hyperprototypes(&self) -> Option<Vec<Vec<Vec<f64>>>> {
        self.outcome.hyper.as_ref().map(|h| {
            (0..h.classes())
                .map(|c| (0..h.bank_size()).map(|i| h.vector(c, i).to_vec()).collect())
                .collect()
        })
    }

    /// Writes the cell directory (metrics, summary, weights, marker).
    #[pyo3(signature = (dir, force=false))]
    fn write(&self, dir: PathBuf, force: bool) -> PyResult<()> {
        let summary = self.exp.summary(self.strategy, self.seed, &self.outcome);
        write_cell(&dir, &self.outcome.records, &summary, &self.outcome, force).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "RunResult('{}', seed={}, rounds={}, final_accuracy={:.4})",
            self.strategy,
            self.seed,
            self.outcome.records.len(),
            self.final_accuracy()
        )
    }
}

#[pyfunction]
fn strategies() -> Vec<&'static str> {
    Strategy::ALL.iter().map(|s| s.name()).collect()
}

#[pyfunction]
fn presets() -> Vec<&'static str> {
    fedhpro::experiment::Preset::ALL.iter().map(|p| p.name()).collect()
}

/// Returns `(loss, dloss/dz)`. `banks[c][i]` is member `i` of class `c`.
#[pyfunction]
#[pyo3(signature = (z, label, banks, margin, tau=losses::DEFAULT_TAU))]
fn hpcl_loss(z: Vec<f64>, label: usize, banks: Vec<Vec<Vec<f64>>>, margin: f64, tau: f64) -> PyResult<(f64, Vec<f64>)> {
    let classes = banks.len();
    let bank_size = banks.first().map_or(0, Vec::len);
    let dim = z.len();
    if banks
        .iter()
        .any(|b| b.len() != bank_size || b.iter().any(|m| m.len() != dim))
    {
        return Err(PyValueError::new_err("banks must be classes x bank_size x len(z)"));
    }
    let flat = banks.into_iter().flatten().flatten().collect();
    let s = HyperPrototypes::from_vec(classes, bank_size, dim, flat).map_err(py_err)?;
    losses::hpcl_loss(&z, label, &s, margin, tau).map_err(py_err)
}

/// Returns `(loss, dloss/dz)` for the smooth-L1 pull of `z` toward `h[label]`.
#[pyfunction]
fn hpal_loss(z: Vec<f64>, label: usize, h: Vec<Vec<f64>>) -> PyResult<(f64, Vec<f64>)> {
    losses::hpal_loss(&z, label, &matrix(h)?).map_err(py_err)
}

#[pyfunction]
fn gm_loss(g: Vec<f64>, g_hp: Vec<f64>) -> PyResult<f64> {
    hyperproto::gm_loss(&g, &g_hp).map_err(py_err)
}

/// Margin of a client from its per-class prototypes; classes with a zero
/// count are treated as absent.
#[pyfunction]
fn client_margin(prototypes: Vec<Vec<f64>>, counts: Vec<usize>) -> PyResult<f64> {
    let classes = counts.len();
    let locals = LocalPrototypes::new(matrix(prototypes)?, counts).map_err(py_err)?;
    Ok(losses::client_margin(&locals, classes))
}

/// Runs the finite-difference suites; returns one dict per suite.
#[pyfunction]
#[pyo3(signature = (suite=None, instances=100, seed=0))]
fn gradcheck<'py>(
    py: Python<'py>,
    suite: Option<&str>,
    instances: usize,
    seed: u64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let suites: Vec<Suite> = match suite {
        Some(name) => vec![*Suite::ALL
            .iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| PyValueError::new_err(format!("unknown suite '{name}'")))?],
        None => Suite::ALL.to_vec(),
    };
    let cfg = GradcheckConfig {
        instances,
        seed,
        ..GradcheckConfig::default()
    };
    let reports = py
        .detach(|| {
            suites
                .iter()
                .map(|&s| run_suite(s, &cfg))
                .collect::<Result<Vec<_>, _>>()
        })
        .map_err(py_err)?;
    reports
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("suite", r.suite.name())?;
            d.set_item("passed", r.passed())?;
            d.set_item("instances", r.instances)?;
            d.set_item("checked", r.checked)?;
            d.set_item("failures", r.failures)?;
            d.set_item("max_rel_error", r.max_rel_error)?;
            Ok(d)
        })
        .collect()
}

/// Mean/std/delta of final accuracy per strategy, as a JSON string.
#[pyfunction]
fn compare(dirs: Vec<PathBuf>) -> PyResult<String> {
    let dirs = collect_run_dirs(&dirs).map_err(py_err)?;
    let cmp = compare_runs(&dirs).map_err(py_err)?;
    serde_json::to_string(&cmp).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn pyfedhpro(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Scenario>()?;
    m.add_class::<RunResult>()?;
    m.add_function(wrap_pyfunction!(strategies, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(hpcl_loss, m)?)?;
    m.add_function(wrap_pyfunction!(hpal_loss, m)?)?;
    m.add_function(wrap_pyfunction!(gm_loss, m)?)?;
    m.add_function(wrap_pyfunction!(client_margin, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    Ok(())
}
