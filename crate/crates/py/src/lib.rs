//! Python bindings. Tensors cross the boundary as nested lists of floats and
//! records as plain dicts.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyAny, PyDict};

use pfedafm::config::ExperimentConfig;
use pfedafm::data::{self, LabeledDataset};
use pfedafm::protocol::{self, ExperimentResult};
use pfedafm::zoo::{self, SplitModel};
use pfedafm::{metrics, runner, Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::ShapeMismatch { .. }
        | Error::LabelOutOfRange { .. }
        | Error::EmptyBatch
        | Error::InfeasiblePartition(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(py_err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn to_py_json<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Experiment configuration. Keyword arguments use the config-file keys.
#[pyclass(name = "Config", module = "pfedafm")]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (algorithm, **overrides))]
    fn new(algorithm: &str, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = ExperimentConfig::default();
        let mut problems = Vec::new();
        if let Err(e) = inner.set("algorithm", algorithm) {
            problems.push(e);
        }
        if let Some(kw) = overrides {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                let value = v.str()?.to_string();
                if let Err(e) = inner.set(&key, &value) {
                    problems.push(e);
                }
            }
        }
        problems.extend(inner.problems());
        if problems.is_empty() {
            Ok(Self { inner })
        } else {
            Err(py_err(Error::Config(problems)))
        }
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        ExperimentConfig::parse(text).map(|inner| Self { inner }).map_err(py_err)
    }

    /// Returns a copy with one key changed.
    fn with_value(&self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<Self> {
        let mut inner = self.inner.clone();
        inner
            .set(key, &value.str()?.to_string())
            .map_err(|e| py_err(Error::Config(vec![e])))?;
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn algorithm(&self) -> String {
        self.inner.algorithm.to_string()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn rounds(&self) -> usize {
        self.inner.rounds
    }

    #[getter]
    fn num_clients(&self) -> usize {
        self.inner.num_clients
    }

    #[getter]
    fn clients_per_round(&self) -> usize {
        self.inner.clients_per_round()
    }

    fn __repr__(&self) -> String {
        format!("Config({})", self.inner.to_text().trim().replace('\n', ", "))
    }
}

/// Records and final state of one experiment.
#[pyclass(name = "Experiment", module = "pfedafm")]
struct PyExperiment {
    result: ExperimentResult,
}

#[pymethods]
impl PyExperiment {
    /// One dict per round.
    fn records<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py_json(py, &self.result.records)
    }

    /// The records exactly as the runner writes them, one JSON object per line.
    fn records_jsonl(&self) -> PyResult<String> {
        let mut out = String::new();
        for r in &self.result.records {
            out.push_str(&serde_json::to_string(r).map_err(|e| PyRuntimeError::new_err(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }

    fn mean_accuracies(&self) -> Vec<f64> {
        self.result.records.iter().map(|r| r.mean_accuracy).collect()
    }

    #[getter]
    fn best_mean_accuracy(&self) -> Option<f64> {
        self.result.best_mean_accuracy()
    }

    /// Per-client series of mean(α).
    fn alpha_trace(&self) -> Vec<Vec<f64>> {
        metrics::alpha_trace(&self.result.records)
    }

    /// Logits of client `k`'s deployed model (the mixed model when the
    /// algorithm uses one).
    fn client_logits(&self, k: usize, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let client = self
            .result
            .federation
            .clients
            .get(k)
            .ok_or_else(|| PyValueError::new_err(format!("no client {k}")))?;
        let x = matrix(x)?;
        let algorithm = self.result.records.first().map(|r| r.algorithm);
        let logits = match algorithm {
            Some(a) if !a.uses_mixture() => client.net.local.forward(&x).map_err(py_err)?.0,
            _ => client.net.forward(&x).map_err(py_err)?.0,
        };
        Ok(rows(&logits))
    }

    fn theta_param_count(&self) -> usize {
        zoo::param_count(&self.result.federation.server.theta)
    }
}

#[pyfunction]
fn run_experiment(py: Python<'_>, config: &PyConfig) -> PyResult<PyExperiment> {
    let config = config.inner.clone();
    let result = py.detach(|| protocol::run_experiment(&config)).map_err(py_err)?;
    Ok(PyExperiment { result })
}

/// Runs every seed repeat into `out_dir` and returns one summary dict per seed.
#[pyfunction]
#[pyo3(signature = (config, out_dir, force = false))]
fn run<'py>(py: Python<'py>, config: &PyConfig, out_dir: std::path::PathBuf, force: bool) -> PyResult<Bound<'py, PyAny>> {
    let config = ExperimentConfig {
        out_dir,
        ..config.inner.clone()
    };
    let summaries = py.detach(|| runner::run(&config, force, &mut |_| {})).map_err(py_err)?;
    to_py_json(py, &summaries)
}

#[pyclass(name = "Dataset", module = "pfedafm")]
struct PyDataset {
    inner: LabeledDataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> PyResult<Self> {
        let inner = LabeledDataset::new(matrix(features)?, labels, num_classes).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        rows(self.inner.features())
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyfunction]
fn generate_synthetic(num_classes: usize, input_dim: usize, per_class: usize, spread: f64, seed: u64) -> PyResult<PyDataset> {
    let inner = data::generate_synthetic(num_classes, input_dim, per_class, spread, seed).map_err(py_err)?;
    Ok(PyDataset { inner })
}

/// Sample indices per client; each client sees exactly `classes_per_client` labels.
#[pyfunction]
fn pathological_partition(dataset: &PyDataset, num_clients: usize, classes_per_client: usize, seed: u64) -> PyResult<Vec<Vec<usize>>> {
    data::pathological_partition(&dataset.inner, num_clients, classes_per_client, seed).map_err(py_err)
}

#[pyfunction]
fn dirichlet_partition(dataset: &PyDataset, num_clients: usize, gamma: f64, seed: u64) -> PyResult<Vec<Vec<usize>>> {
    data::dirichlet_partition(&dataset.inner, num_clients, gamma, seed).map_err(py_err)
}

#[pyclass(name = "ZooModel", module = "pfedafm")]
struct PyZooModel {
    inner: SplitModel,
}

#[pymethods]
impl PyZooModel {
    fn forward(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.forward(&matrix(x)?).map_err(py_err)?.0))
    }

    #[getter]
    fn variant(&self) -> usize {
        self.inner.variant()
    }

    fn param_count(&self) -> usize {
        zoo::param_count(&self.inner)
    }
}

#[pyfunction]
fn build_zoo_model(variant: usize, input_dim: usize, rep_dim: usize, num_classes: usize, seed: u64) -> PyResult<PyZooModel> {
    let inner = zoo::build_zoo_model(variant, input_dim, rep_dim, num_classes, seed).map_err(py_err)?;
    Ok(PyZooModel { inner })
}

/// Layer widths of zoo variant `variant`, input first.
#[pyfunction]
fn zoo_extractor_dims(variant: usize, input_dim: usize, rep_dim: usize) -> PyResult<Vec<usize>> {
    zoo::zoo_extractor_dims(variant, input_dim, rep_dim).map_err(py_err)
}

#[pyfunction]
fn homo_param_count(input_dim: usize, rep_dim: usize) -> PyResult<usize> {
    let homo = zoo::build_homo_extractor(input_dim, rep_dim, 0).map_err(py_err)?;
    Ok(zoo::param_count(&homo))
}

/// `rg·(1 − α) + rf·α`, row by row.
#[pyfunction]
fn mix_features(rg: Vec<Vec<f64>>, rf: Vec<Vec<f64>>, alpha: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    let alpha = Tensor::vector(alpha).map_err(py_err)?;
    let mixed = zoo::mix_features(&matrix(rg)?, &matrix(rf)?, &alpha).map_err(py_err)?;
    Ok(rows(&mixed))
}

#[pyfunction]
fn aggregate(params: Vec<Vec<f64>>, sizes: Vec<usize>) -> PyResult<Vec<f64>> {
    let refs: Vec<&[f64]> = params.iter().map(Vec::as_slice).collect();
    protocol::aggregate(&refs, &sizes).map_err(py_err)
}

#[pyfunction]
fn mean_accuracy(per_client: Vec<f64>) -> PyResult<f64> {
    metrics::mean_accuracy(&per_client).map_err(py_err)
}

#[pyfunction]
fn comm_cost(rounds_to_target: u64, per_round_params: u64) -> u64 {
    metrics::comm_cost(rounds_to_target, per_round_params)
}

/// 1-based index of the first round reaching `target`, or None.
#[pyfunction]
fn rounds_to_target(mean_accuracies: Vec<f64>, target: f64) -> Option<usize> {
    metrics::rounds_to_target(&mean_accuracies, target)
}

#[pymodule(name = "pfedafm")]
fn init(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyExperiment>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyZooModel>()?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(pathological_partition, m)?)?;
    m.add_function(wrap_pyfunction!(dirichlet_partition, m)?)?;
    m.add_function(wrap_pyfunction!(build_zoo_model, m)?)?;
    m.add_function(wrap_pyfunction!(zoo_extractor_dims, m)?)?;
    m.add_function(wrap_pyfunction!(homo_param_count, m)?)?;
    m.add_function(wrap_pyfunction!(mix_features, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(mean_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(comm_cost, m)?)?;
    m.add_function(wrap_pyfunction!(rounds_to_target, m)?)?;
    Ok(())
}
