//! Python bindings for the simulator core.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use fedmem_core::data::{self, PoolSpec};
use fedmem_core::datastore::embed_samples;
use fedmem_core::harness::{self, ExperimentConfig};
use fedmem_core::personalize::{self, DEFAULT_LAMBDA_GRID};
use fedmem_core::{Datastore, FedError, KernelConfig, Model, NeighborIndex, PersonalizedPredictor, Policy, Sample};

create_exception!(fedmem, FedmemError, PyException);

fn err(e: FedError) -> PyErr {
    FedmemError::new_err(e.to_string())
}

fn samples(xs: Vec<Vec<f64>>, ys: Vec<usize>) -> PyResult<Vec<Sample>> {
    if xs.len() != ys.len() {
        return Err(FedmemError::new_err(format!("{} inputs but {} labels", xs.len(), ys.len())));
    }
    Ok(xs.into_iter().zip(ys).map(|(x, y)| Sample::new(x, y)).collect())
}

fn split(samples: &[Sample]) -> (Vec<Vec<f64>>, Vec<usize>) {
    samples.iter().map(|s| (s.x.clone(), s.y)).unzip()
}

/// Multi-layer perceptron with ReLU hidden layers.
#[pyclass(name = "Model", module = "fedmem")]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// `dims` lists the layer widths from input to number of classes.
    #[staticmethod]
    #[pyo3(signature = (dims, seed=0))]
    fn mlp(dims: Vec<usize>, seed: u64) -> PyResult<Self> {
        Ok(PyModel { inner: Model::mlp(&dims, seed).map_err(err)? })
    }

    #[staticmethod]
    fn from_bytes(bytes: &[u8]) -> PyResult<Self> {
        Ok(PyModel { inner: Model::from_bytes(bytes).map_err(err)? })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn repr_dim(&self) -> usize {
        self.inner.repr_dim()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn params(&self) -> Vec<f64> {
        self.inner.params().to_vec()
    }

    /// Output logits.
    fn forward(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.forward(&x).map_err(err)?.logits)
    }

    fn predict_proba(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.predict_proba(&x).map_err(err)
    }

    /// Hidden representation used as a datastore key.
    fn embed(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.embed(&x).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(input_dim={}, repr_dim={}, num_classes={}, num_params={})",
            self.inner.input_dim(),
            self.inner.repr_dim(),
            self.inner.num_classes(),
            self.inner.num_params()
        )
    }
}

/// Client-local store of (representation, label) pairs.
#[pyclass(name = "Datastore", module = "fedmem")]
struct PyDatastore {
    inner: Datastore,
}

#[pymethods]
impl PyDatastore {
    /// Embeds `xs` with `model` and keeps a seeded `capacity` fraction.
    #[staticmethod]
    #[pyo3(signature = (model, xs, ys, capacity=1.0, seed=0))]
    fn build(model: &PyModel, xs: Vec<Vec<f64>>, ys: Vec<usize>, capacity: f64, seed: u64) -> PyResult<Self> {
        let s = samples(xs, ys)?;
        Ok(PyDatastore { inner: Datastore::build(&model.inner, &s, capacity, seed).map_err(err)? })
    }

    #[staticmethod]
    fn from_bytes(bytes: &[u8]) -> PyResult<Self> {
        Ok(PyDatastore { inner: Datastore::from_bytes(bytes).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| err(e.into()))?;
        Self::from_bytes(&bytes)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        std::fs::write(path, self.inner.to_bytes()).map_err(|e| err(e.into()))
    }

    /// Sets the update policy: "fixed", "fifo" or "concatenate".
    #[pyo3(signature = (policy, capacity=None))]
    fn set_policy(&mut self, policy: &str, capacity: Option<usize>) -> PyResult<()> {
        let p: Policy = policy.parse().map_err(err)?;
        self.inner = self.inner.clone().with_policy(p, capacity).map_err(err)?;
        Ok(())
    }

    #[getter]
    fn policy(&self) -> &'static str {
        self.inner.policy().name()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.entries().iter().map(|e| e.label).collect()
    }

    /// Embeds new samples and applies the store policy.
    fn update(&mut self, model: &PyModel, xs: Vec<Vec<f64>>, ys: Vec<usize>) -> PyResult<()> {
        let batch = embed_samples(&model.inner, &samples(xs, ys)?).map_err(err)?;
        self.inner.update(&batch).map_err(err)
    }

    /// Nearest entries as `(index, label, scaled distance)` triples.
    #[pyo3(signature = (query, k=10, sigma=1.0))]
    fn knn(&self, query: Vec<f64>, k: usize, sigma: f64) -> PyResult<Vec<(usize, usize, f64)>> {
        let nb = self.inner.knn_query(&query, k, sigma).map_err(err)?;
        Ok(nb.neighbors.iter().map(|n| (n.index, n.label, n.distance)).collect())
    }

    /// Label posterior from the `k` nearest entries.
    #[pyo3(signature = (query, num_classes, k=10, sigma=1.0))]
    fn knn_posterior(&self, query: Vec<f64>, num_classes: usize, k: usize, sigma: f64) -> PyResult<Vec<f64>> {
        let nb = self.inner.knn_query(&query, k, sigma).map_err(err)?;
        personalize::knn_posterior(&nb, num_classes).map_err(err)
    }

    /// Returns the compressed prototypes as `(projected key, label)` pairs.
    #[pyo3(signature = (num_prototypes, proj_dim, seed=0))]
    fn compress(&self, num_prototypes: usize, proj_dim: usize, seed: u64) -> PyResult<Vec<(Vec<f64>, usize)>> {
        let p = self.inner.compress(num_prototypes, proj_dim, seed).map_err(err)?;
        Ok(p.prototypes().to_vec())
    }

    fn __repr__(&self) -> String {
        format!("Datastore(len={}, dim={}, policy={})", self.inner.len(), self.inner.dim(), self.inner.policy().name())
    }
}

/// Mixes a kNN posterior with the model posterior: `lambda` weights the kNN side.
#[pyfunction]
fn interpolate(knn: Vec<f64>, global_probs: Vec<f64>, lambda: f64) -> PyResult<Vec<f64>> {
    personalize::interpolate(&knn, &global_probs, lambda).map_err(err)
}

/// Gaussian-blob pool as `(xs, ys)`.
#[pyfunction]
#[pyo3(signature = (num_classes, samples_per_class, feature_dim, separation=1.5, seed=0, num_coarse=0))]
fn make_synthetic_pool(
    num_classes: usize,
    samples_per_class: usize,
    feature_dim: usize,
    separation: f64,
    seed: u64,
    num_coarse: usize,
) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let spec = PoolSpec { num_classes, num_coarse, samples_per_class, feature_dim, separation, seed };
    Ok(split(&data::make_synthetic_pool(&spec).map_err(err)?.samples))
}

/// Dirichlet label-skew partition; returns the sample indices of each client.
#[pyfunction]
#[pyo3(signature = (ys, num_classes, num_clients, alpha, seed=0))]
fn dirichlet_partition(
    ys: Vec<usize>,
    num_classes: usize,
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> PyResult<Vec<Vec<usize>>> {
    let pool = data::LabeledPool {
        samples: ys.into_iter().map(|y| Sample::new(Vec::new(), y)).collect(),
        num_classes,
        coarse_of: None,
    };
    Ok(data::dirichlet_partition(&pool, num_clients, alpha, seed).map_err(err)?.client_indices())
}

/// Picks the mixing weight with the best validation accuracy. Returns
/// `(lambda, accuracy)`.
#[pyfunction]
#[pyo3(signature = (model, store, xs, ys, k=10, sigma=1.0, grid=None))]
fn tune_lambda(
    model: &PyModel,
    store: &PyDatastore,
    xs: Vec<Vec<f64>>,
    ys: Vec<usize>,
    k: usize,
    sigma: f64,
    grid: Option<Vec<f64>>,
) -> PyResult<(f64, f64)> {
    let grid = grid.unwrap_or_else(|| DEFAULT_LAMBDA_GRID.to_vec());
    let val = samples(xs, ys)?;
    personalize::tune_lambda(&model.inner, &store.inner, KernelConfig { k, sigma }, &val, &grid).map_err(err)
}

/// Accuracy of the mixed predictor on `(xs, ys)`.
#[pyfunction]
#[pyo3(signature = (model, store, xs, ys, lambda, k=10, sigma=1.0))]
fn evaluate(
    model: &PyModel,
    store: &PyDatastore,
    xs: Vec<Vec<f64>>,
    ys: Vec<usize>,
    lambda: f64,
    k: usize,
    sigma: f64,
) -> PyResult<f64> {
    let pred = PersonalizedPredictor::new(&model.inner, &store.inner, KernelConfig { k, sigma }, lambda).map_err(err)?;
    pred.evaluate(&samples(xs, ys)?).map_err(err)
}

/// Runs a config file and writes its outputs. Returns the metric rows as
/// `(group, method, settings, weighted, unweighted, bottom_decile)`.
#[pyfunction]
#[pyo3(signature = (path, seed=None, out=None))]
#[allow(clippy::type_complexity)]
fn run_config(
    path: PathBuf,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> PyResult<Vec<(String, String, Vec<(String, String)>, f64, f64, f64)>> {
    let mut cfg = ExperimentConfig::load(&path).map_err(err)?;
    harness::apply_overrides(&mut cfg, seed, out);
    let report = harness::run(&cfg).map_err(err)?;
    Ok(report
        .metrics
        .into_iter()
        .map(|r| {
            let settings = r.settings.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
            (r.group, r.method, settings, r.metrics.weighted, r.metrics.unweighted, r.metrics.bottom_decile)
        })
        .collect())
}

#[pymodule]
fn fedmem(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FedmemError", m.py().get_type::<FedmemError>())?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyDatastore>()?;
    m.add_function(wrap_pyfunction!(interpolate, m)?)?;
    m.add_function(wrap_pyfunction!(make_synthetic_pool, m)?)?;
    m.add_function(wrap_pyfunction!(dirichlet_partition, m)?)?;
    m.add_function(wrap_pyfunction!(tune_lambda, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    Ok(())
}
