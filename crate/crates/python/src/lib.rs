//! Python bindings: datasets, run configs, checkpoints and the pipeline
//! stages, plus the clustering and affinity primitives.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use patchmoe::affinity::{self, AffinityMatrix};
use patchmoe::checkpoint::{Checkpoint, RouterKind};
use patchmoe::config::RunConfig;
use patchmoe::dataset::{self, Dataset, Split, SynthSpec};
use patchmoe::error::Error;
use patchmoe::pipeline;
use patchmoe::router_init;
use patchmoe::tensor::Tensor;

fn py_err(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        4 => PyRuntimeError::new_err(e.to_string()),
        _ => PyIOError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Tensor::matrix(rows.len(), cols, rows.concat()).map_err(py_err)
}

fn to_rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows_cols().0).map(|r| t.row(r).to_vec()).collect()
}

#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// Synthetic dataset from a TOML spec string (empty string for defaults).
    #[staticmethod]
    fn synthetic(spec_toml: &str) -> PyResult<Self> {
        let spec: SynthSpec = toml::from_str(spec_toml).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self {
            inner: dataset::generate(&spec).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Dataset::load_dir(&dir).map_err(py_err)?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save_dir(&dir).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.items.len()
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.class_names.clone()
    }

    #[getter]
    fn families(&self) -> Option<Vec<usize>> {
        self.inner.families.clone()
    }

    fn class_counts(&self) -> Vec<usize> {
        self.inner.class_counts()
    }

    fn split_sizes(&self) -> (usize, usize) {
        (
            self.inner.split_indices(Split::Train).len(),
            self.inner.split_indices(Split::Val).len(),
        )
    }
}

#[pyclass(name = "RunConfig", skip_from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Parses a TOML run config; missing keys take their defaults.
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        let inner = RunConfig::parse(text).map_err(py_err)?;
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::load(&path).map_err(py_err)?,
        })
    }

    /// Copy with `key=value` overrides applied.
    fn with_overrides(&self, sets: Vec<String>) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::resolve(Some(&self.inner), None, &sets).map_err(py_err)?,
        })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }
}

#[pyclass(name = "Checkpoint")]
struct PyCheckpoint {
    inner: Checkpoint<f32>,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<String> {
        let path = self.inner.save(&dir).map_err(py_err)?;
        Ok(path.display().to_string())
    }

    #[getter]
    fn stage(&self) -> String {
        self.inner.stage().to_string()
    }

    /// The `inspect` report as a JSON string.
    fn inspect(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&pipeline::inspect(&self.inner)).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    /// Evaluation metrics CSV for both splits.
    #[pyo3(signature = (data, batch_size = 64))]
    fn evaluate(&self, data: &PyDataset, batch_size: usize) -> PyResult<String> {
        let reports = pipeline::eval(&self.inner, &data.inner, batch_size).map_err(py_err)?;
        Ok(pipeline::eval_csv(&reports))
    }

    /// Class × expert router affinity over random validation batches.
    #[pyo3(signature = (data, layer, batches = 4, batch_size = 32, seed = 0))]
    fn affinity_post(&self, data: &PyDataset, layer: usize, batches: usize, batch_size: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let m = affinity::affinity_post(&self.inner.model, &data.inner, layer, batches, batch_size, seed).map_err(py_err)?;
        Ok(affinity_rows(&m))
    }
}

fn affinity_rows(m: &AffinityMatrix) -> Vec<Vec<f64>> {
    (0..m.classes).map(|c| m.row(c).to_vec()).collect()
}

/// Trains a dense model; returns the checkpoint and the metrics CSV.
#[pyfunction]
fn pretrain(config: &PyRunConfig, data: &PyDataset) -> PyResult<(PyCheckpoint, String)> {
    let (ck, log) = pipeline::pretrain(&config.inner, &data.inner).map_err(py_err)?;
    Ok((PyCheckpoint { inner: ck }, log.to_csv()))
}

/// Converts the configured layers of a dense checkpoint to MoE blocks.
#[pyfunction]
#[pyo3(signature = (checkpoint, data, config, router = "cluster"))]
fn moefy(checkpoint: &PyCheckpoint, data: &PyDataset, config: &PyRunConfig, router: &str) -> PyResult<PyCheckpoint> {
    let kind = match router {
        "cluster" => RouterKind::Cluster,
        "random" => RouterKind::Random,
        other => return Err(PyValueError::new_err(format!("unknown router kind {other:?}"))),
    };
    let expert_cfg = config.inner.moe.expert_init();
    let (ck, _) = pipeline::moefy(checkpoint.inner.clone(), &data.inner, &config.inner, kind, &expert_cfg).map_err(py_err)?;
    Ok(PyCheckpoint { inner: ck })
}

/// Finetunes a converted checkpoint; returns it with the metrics CSV.
#[pyfunction]
fn finetune(checkpoint: &PyCheckpoint, data: &PyDataset, config: &PyRunConfig) -> PyResult<(PyCheckpoint, String)> {
    let (ck, log) = pipeline::finetune(checkpoint.inner.clone(), &data.inner, &config.inner).map_err(py_err)?;
    Ok((PyCheckpoint { inner: ck }, log.to_csv()))
}

/// Indices of the `k` representative patches of one class. `patches` is
/// `[N][pixels][d]`.
#[pyfunction]
fn select_representative_patches(patches: Vec<Vec<Vec<f64>>>, k: usize, steps: usize) -> PyResult<Vec<usize>> {
    let n = patches.len();
    let px = patches.first().map_or(0, Vec::len);
    let d = patches.first().and_then(|p| p.first()).map_or(0, Vec::len);
    if patches.iter().any(|p| p.len() != px || p.iter().any(|r| r.len() != d)) {
        return Err(PyValueError::new_err("patches must be a regular [N][pixels][d] array"));
    }
    let flat: Vec<f64> = patches.into_iter().flatten().flatten().collect();
    let x = Tensor::new(vec![n, px, d], flat).map_err(py_err)?;
    Ok(router_init::select_representative_patches(&x, k, steps).map_err(py_err)?.indices)
}

/// Ward merge sequence as `(a, b, distance, size)` tuples.
#[pyfunction]
fn ward_cluster(points: Vec<Vec<f64>>) -> PyResult<Vec<(usize, usize, f64, usize)>> {
    let tree = router_init::ward_cluster(&matrix(points)?).map_err(py_err)?;
    Ok(tree.merges.iter().map(|m| (m.a, m.b, m.distance, m.size)).collect())
}

/// Cluster label per point after cutting the Ward tree at `clusters`.
#[pyfunction]
fn ward_labels(points: Vec<Vec<f64>>, clusters: usize) -> PyResult<Vec<usize>> {
    let tree = router_init::ward_cluster(&matrix(points)?).map_err(py_err)?;
    tree.cut(clusters).map_err(py_err)
}

#[pyfunction]
fn adjusted_rand_index(a: Vec<usize>, b: Vec<usize>) -> PyResult<f64> {
    if a.len() != b.len() {
        return Err(PyValueError::new_err("labelings differ in length"));
    }
    Ok(router_init::adjusted_rand_index(&a, &b))
}

/// Sharp-temperature pre-init affinity with the 0.05 cut-off.
#[pyfunction]
fn figure_d_variant(centroids: Vec<Vec<f64>>, class_patches: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
    let centroids = matrix(centroids)?;
    let patches = class_patches.into_iter().map(matrix).collect::<PyResult<Vec<_>>>()?;
    let m = affinity::figure_d_variant(&centroids, &patches, 0).map_err(py_err)?;
    Ok(affinity_rows(&m))
}

/// Starved experts (no class's strongest expert) of an affinity matrix.
#[pyfunction]
fn starved_experts(affinity: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    let t = matrix(affinity)?;
    let (classes, experts) = t.rows_cols();
    let m = AffinityMatrix {
        classes,
        experts,
        values: t.into_data(),
        missing: vec![false; classes],
        mode: affinity::AffinityMode::PreInit,
        temperature: 1.0,
        threshold: 0.0,
        provenance: affinity::Provenance {
            layer: 0,
            seed: None,
            batches: None,
            batch_size: None,
        },
    };
    Ok(affinity::collapse_metrics(&m, None).starved)
}

#[pyfunction]
fn min_max_scale(samples: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let t = matrix(samples)?;
    let scaler = patchmoe::ops::minmax_fit(&t).map_err(py_err)?;
    Ok(to_rows(&patchmoe::ops::minmax_apply(&scaler, &t).map_err(py_err)?))
}

#[pymodule]
fn patchmoe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(moefy, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(select_representative_patches, m)?)?;
    m.add_function(wrap_pyfunction!(ward_cluster, m)?)?;
    m.add_function(wrap_pyfunction!(ward_labels, m)?)?;
    m.add_function(wrap_pyfunction!(adjusted_rand_index, m)?)?;
    m.add_function(wrap_pyfunction!(figure_d_variant, m)?)?;
    m.add_function(wrap_pyfunction!(starved_experts, m)?)?;
    m.add_function(wrap_pyfunction!(min_max_scale, m)?)?;
    Ok(())
}
