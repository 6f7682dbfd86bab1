//! Python bindings: datasets, models, training and evaluation.

use std::path::PathBuf;

use engine::checkpoint::{load_checkpoint, save_checkpoint};
use engine::dataset::{build_splits, ingest_path, kcore_filter_users, IngestOptions, InteractionDataset, Split};
use engine::evaluator::evaluate_at;
use engine::graph::{NormalizedAdjacency, PropagationOperator};
use engine::model::{Model, ModelConfig, Variant};
use engine::ode::{Method, SolverConfig};
use engine::synthetic::planted_two_block;
use engine::trainer::{fit, TrainConfig};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

type Rows = Vec<Vec<f64>>;

fn py_err(e: engine::Error) -> PyErr {
    match e {
        engine::Error::Io(_) | engine::Error::Ingest { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = engine::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

fn split_of(s: &str) -> PyResult<Split> {
    match s {
        "validation" => Ok(Split::Validation),
        "test" => Ok(Split::Test),
        other => Err(PyValueError::new_err(format!(
            "split must be 'validation' or 'test', got {other:?}"
        ))),
    }
}

/// Leave-one-out interaction dataset.
#[pyclass(name = "Dataset", module = "cdecf", frozen)]
struct PyDataset {
    inner: InteractionDataset,
}

impl PyDataset {
    fn operator(&self, order: usize) -> PyResult<PropagationOperator> {
        let adj = NormalizedAdjacency::from_dataset(&self.inner).map_err(py_err)?;
        PropagationOperator::new(adj, order).map_err(py_err)
    }
}

#[pymethods]
impl PyDataset {
    /// Ingest a delimited file, keep users with at least `k_core` distinct
    /// items and split chronologically.
    #[staticmethod]
    #[pyo3(signature = (path, k_core = 5, delimiter = ",", header = false))]
    fn prepare(path: PathBuf, k_core: usize, delimiter: &str, header: bool) -> PyResult<Self> {
        let &[delimiter] = delimiter.as_bytes() else {
            return Err(PyValueError::new_err("delimiter must be a single byte"));
        };
        let opts = IngestOptions {
            delimiter,
            has_header: header,
        };
        let (raw, _) = ingest_path(&path, &opts).map_err(py_err)?;
        let kept = kcore_filter_users(raw, k_core).map_err(py_err)?;
        Ok(PyDataset {
            inner: build_splits(&kept).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: InteractionDataset::load(&path).map_err(py_err)?,
        })
    }

    /// Two user blocks that each only touch their own half of the items.
    #[staticmethod]
    #[pyo3(signature = (num_users = 40, num_items = 40, per_user = 8, seed = 0))]
    fn planted(num_users: usize, num_items: usize, per_user: usize, seed: u64) -> PyResult<Self> {
        Ok(PyDataset {
            inner: planted_two_block(num_users, num_items, per_user, seed).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn num_users(&self) -> usize {
        self.inner.num_users()
    }

    #[getter]
    fn num_items(&self) -> usize {
        self.inner.num_items()
    }

    #[getter]
    fn sparsity(&self) -> f64 {
        self.inner.sparsity()
    }

    fn train_pairs(&self) -> Vec<(u32, u32)> {
        self.inner.train().to_vec()
    }

    fn validation(&self) -> Vec<u32> {
        self.inner.validation().to_vec()
    }

    fn test(&self) -> Vec<u32> {
        self.inner.test().to_vec()
    }

    fn user_history(&self, user: usize) -> PyResult<Vec<u32>> {
        if user >= self.inner.num_users() {
            return Err(PyValueError::new_err(format!("user {user} out of range")));
        }
        Ok(self.inner.user_history(user).to_vec())
    }

    fn user_keys(&self) -> Vec<String> {
        self.inner.user_keys().to_vec()
    }

    fn item_keys(&self) -> Vec<String> {
        self.inner.item_keys().to_vec()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(users={}, items={}, train={})",
            self.inner.num_users(),
            self.inner.num_items(),
            self.inner.train().len()
        )
    }
}

/// Graph ODE recommender.
#[pyclass(name = "Model", module = "cdecf")]
struct PyModel {
    inner: Model,
}

impl PyModel {
    fn check(&self, ds: &PyDataset) -> PyResult<()> {
        if self.inner.num_users() != ds.inner.num_users() || self.inner.num_items() != ds.inner.num_items() {
            return Err(py_err(engine::Error::CheckpointMismatch(format!(
                "model has {} users × {} items, dataset has {} × {}",
                self.inner.num_users(),
                self.inner.num_items(),
                ds.inner.num_users(),
                ds.inner.num_items()
            ))));
        }
        Ok(())
    }
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (dataset, variant = "controlled", embedding_dim = 64, propagation_order = 2,
                        solver = "euler", t1 = 6.5, steps = 7, l2_lambda = 1e-4, init_std = 0.1, seed = 2024))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        dataset: &PyDataset,
        variant: &str,
        embedding_dim: usize,
        propagation_order: usize,
        solver: &str,
        t1: f64,
        steps: usize,
        l2_lambda: f64,
        init_std: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            variant: parse::<Variant>(variant)?,
            embedding_dim,
            propagation_order,
            solver: SolverConfig::new(parse::<Method>(solver)?, t1, steps),
            l2_lambda,
            init_std,
            seed,
        };
        let inner = Model::new(config, dataset.inner.num_users(), dataset.inner.num_items()).map_err(py_err)?;
        Ok(PyModel { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: load_checkpoint(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.config.variant.name()
    }

    /// Model configuration as canonical JSON.
    #[getter]
    fn config_json(&self) -> String {
        serde_json::to_string(&self.inner.config).expect("config serialises")
    }

    /// Trains in place (keeping the best validation state) and returns the
    /// per-epoch log as a list of dicts.
    #[pyo3(signature = (dataset, epochs = 100, batch_size = 2048, learning_rate = 1e-3, optimizer = "adam",
                        eval_every = 5, patience = 10, seed = 2024))]
    #[allow(clippy::too_many_arguments)]
    fn fit<'py>(
        &mut self,
        py: Python<'py>,
        dataset: &PyDataset,
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        optimizer: &str,
        eval_every: usize,
        patience: usize,
        seed: u64,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.check(dataset)?;
        let optimizer = serde_json::from_value(serde_json::Value::String(optimizer.to_ascii_lowercase()))
            .map_err(|_| PyValueError::new_err("optimizer must be 'adam' or 'sgd'"))?;
        let cfg = TrainConfig {
            epochs,
            batch_size,
            learning_rate,
            optimizer,
            early_stop_patience: patience,
            eval_every,
            seed,
            ..TrainConfig::default()
        };
        let op = dataset.operator(self.inner.config.propagation_order)?;
        let model = self.inner.clone();
        let outcome = py.detach(|| fit(model, &dataset.inner, &op, &cfg)).map_err(py_err)?;
        self.inner = outcome.best;
        outcome
            .log
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("epoch", r.epoch)?;
                d.set_item("loss", r.loss)?;
                d.set_item("recall20", r.recall20)?;
                d.set_item("ndcg20", r.ndcg20)?;
                d.set_item("seconds", r.seconds)?;
                Ok(d)
            })
            .collect()
    }

    /// Recall@K and NDCG@K on the chosen split, one dict per cutoff.
    #[pyo3(signature = (dataset, ks = vec![10, 20], split = "test"))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        ks: Vec<usize>,
        split: &str,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.check(dataset)?;
        if ks.is_empty() || ks.contains(&0) {
            return Err(PyValueError::new_err("ks needs at least one cutoff, all >= 1"));
        }
        let split = split_of(split)?;
        let op = dataset.operator(self.inner.config.propagation_order)?;
        let (emb, _) = self.inner.forward(&op).map_err(py_err)?;
        evaluate_at(&emb, &dataset.inner, &ks, split)
            .into_iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("k", r.k)?;
                d.set_item("recall", r.recall_at_k)?;
                d.set_item("ndcg", r.ndcg_at_k)?;
                d.set_item("users", r.users_evaluated)?;
                Ok(d)
            })
            .collect()
    }

    /// Scores of every item for one user.
    fn scores(&self, dataset: &PyDataset, user: usize) -> PyResult<Vec<f64>> {
        self.check(dataset)?;
        if user >= self.inner.num_users() {
            return Err(PyValueError::new_err(format!("user {user} out of range")));
        }
        let op = dataset.operator(self.inner.config.propagation_order)?;
        let (emb, _) = self.inner.forward(&op).map_err(py_err)?;
        Ok(emb.all_scores(user).to_vec())
    }

    /// Final user and item embeddings as nested lists.
    fn embeddings(&self, dataset: &PyDataset) -> PyResult<(Rows, Rows)> {
        self.check(dataset)?;
        let op = dataset.operator(self.inner.config.propagation_order)?;
        let (emb, _) = self.inner.forward(&op).map_err(py_err)?;
        let users = (0..emb.num_users()).map(|u| emb.user(u).to_vec()).collect();
        let items = (0..emb.num_items()).map(|i| emb.item(i).to_vec()).collect();
        Ok((users, items))
    }

    /// `(time, weights)` at every solver state; weights are per node.
    fn weight_trajectory(&self, dataset: &PyDataset) -> PyResult<Vec<(f64, Vec<f64>)>> {
        self.check(dataset)?;
        let op = dataset.operator(self.inner.config.propagation_order)?;
        let (_, trace) = self.inner.forward(&op).map_err(py_err)?;
        let traj = self.inner.weight_trajectory(&op, &trace).map_err(py_err)?;
        Ok(traj.into_iter().map(|(t, w)| (t, w.to_vec())).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(variant={}, users={}, items={}, dim={})",
            self.inner.config.variant,
            self.inner.num_users(),
            self.inner.num_items(),
            self.inner.config.embedding_dim
        )
    }
}

#[pymodule(name = "cdecf")]
fn cdecf_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
