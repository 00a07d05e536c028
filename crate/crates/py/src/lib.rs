//! Python bindings: datasets, masking, partitioning, training and evaluation.

use meshmae::datasets::{generate_dataset, Dataset, SyntheticSpec};
use meshmae::diffcore::Checkpoint;
use meshmae::eval::{evaluate, summarize_rollouts, EncoderSimulator, EvalSummary, RolloutOptions};
use meshmae::masking::{default_k, khop_augment, sample_mask};
use meshmae::mesh::{FeatureLayout, Trajectory, NODE_TYPE_NAMES};
use meshmae::model::{MaskedAutoencoder, ModelDims};
use meshmae::partition::metis_like_partition;
use meshmae::train::{lr_at, RunConfig, TrainConfig, Trainer};
use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::path::Path;
use std::sync::Arc;

create_exception!(meshmae, MeshmaeError, PyValueError, "Library error; `args[0]` is the error kind.");

fn err(e: meshmae::Error) -> PyErr {
    MeshmaeError::new_err((e.kind(), e.to_string()))
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for meshmae::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(err)
    }
}

/// Train and test trajectories of one dataset.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset(Arc<Dataset>);

#[pymethods]
impl PyDataset {
    /// Reads a dataset directory written by `generate`.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self(Arc::new(Dataset::load(Path::new(path)).py()?)))
    }

    /// Builds a preset in memory.
    #[staticmethod]
    #[pyo3(signature = (name, n_train, n_test, steps=None, resolution=None, seed=None))]
    fn preset(
        name: &str,
        n_train: usize,
        n_test: usize,
        steps: Option<usize>,
        resolution: Option<usize>,
        seed: Option<u64>,
    ) -> PyResult<Self> {
        let spec = spec_for(name, steps, resolution, seed)?;
        Ok(Self(Arc::new(Dataset::in_memory(&spec, n_train, n_test).py()?)))
    }

    #[getter]
    fn name(&self) -> String {
        self.0.manifest.name.clone()
    }

    #[getter]
    fn n_train(&self) -> usize {
        self.0.train.len()
    }

    #[getter]
    fn n_test(&self) -> usize {
        self.0.test.len()
    }

    #[getter]
    fn field_names(&self) -> Vec<String> {
        self.0.manifest.field_names.clone()
    }

    /// Trajectory `index` of `split` ("train" or "test").
    #[pyo3(signature = (index, split="train"))]
    fn trajectory(&self, index: usize, split: &str) -> PyResult<PyTrajectory> {
        let list = match split {
            "train" => &self.0.train,
            "test" => &self.0.test,
            _ => return Err(PyValueError::new_err("split must be 'train' or 'test'")),
        };
        list.get(index)
            .cloned()
            .map(PyTrajectory)
            .ok_or_else(|| PyValueError::new_err(format!("no {split} trajectory {index}")))
    }

    fn __repr__(&self) -> String {
        format!("Dataset({:?}, train={}, test={})", self.name(), self.n_train(), self.n_test())
    }
}

fn spec_for(name: &str, steps: Option<usize>, resolution: Option<usize>, seed: Option<u64>) -> PyResult<SyntheticSpec> {
    let mut spec = SyntheticSpec::preset(name).py()?;
    if let Some(s) = steps {
        spec.n_steps = s;
    }
    if let Some(r) = resolution {
        spec.resolution = r;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    Ok(spec)
}

/// One trajectory on a fixed mesh.
#[pyclass(name = "Trajectory", frozen)]
struct PyTrajectory(Trajectory);

#[pymethods]
impl PyTrajectory {
    #[getter]
    fn n_nodes(&self) -> usize {
        self.0.n_nodes()
    }

    #[getter]
    fn n_steps(&self) -> usize {
        self.0.n_steps
    }

    #[getter]
    fn n_fields(&self) -> usize {
        self.0.n_fields()
    }

    #[getter]
    fn n_edges(&self) -> usize {
        self.0.graph.n_edges()
    }

    /// `[N][dim]` node coordinates.
    #[getter]
    fn positions(&self) -> Vec<Vec<f32>> {
        let g = &self.0.graph;
        (0..g.n_nodes()).map(|i| g.position(i).to_vec()).collect()
    }

    #[getter]
    fn node_types(&self) -> Vec<&'static str> {
        self.0.graph.node_type.iter().map(|t| NODE_TYPE_NAMES[t.index()]).collect()
    }

    /// Undirected edges `(u, v)` with `u < v`.
    fn edges(&self) -> Vec<(usize, usize)> {
        self.0.graph.undirected_edges()
    }

    /// Fields at step `t` as `[N][q]`.
    fn state(&self, t: usize) -> PyResult<Vec<Vec<f32>>> {
        if t >= self.0.n_steps {
            return Err(PyValueError::new_err(format!("step {t} out of range")));
        }
        Ok(self.0.state(t).chunks(self.0.n_fields()).map(<[f32]>::to_vec).collect())
    }
}

/// Samples a mask with K-hop shortcuts. Returns a dict with `masked`
/// (bool per node), `visible_index`, `masked_index` and `khop_edges`.
#[pyfunction]
#[pyo3(signature = (trajectory, ratio, seed, k=None))]
fn mask<'py>(
    py: Python<'py>,
    trajectory: &PyTrajectory,
    ratio: f64,
    seed: u64,
    k: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let g = &trajectory.0.graph;
    let k = k.unwrap_or_else(|| default_k(ratio));
    let plan = khop_augment(g, &sample_mask(g, ratio, seed).py()?, k);
    let d = PyDict::new(py);
    d.set_item("masked", plan.masked)?;
    d.set_item("visible_index", plan.visible_index)?;
    d.set_item("masked_index", plan.masked_index)?;
    d.set_item("khop_edges", plan.khop_edges)?;
    d.set_item("k", k)?;
    Ok(d)
}

/// METIS-style partition into `parts` node sets.
#[pyfunction]
#[pyo3(signature = (trajectory, parts, seed=0))]
fn partition(trajectory: &PyTrajectory, parts: usize, seed: u64) -> PyResult<Vec<Vec<usize>>> {
    Ok(metis_like_partition(&trajectory.0.graph, parts, seed).py()?.parts)
}

/// Writes a preset dataset to `out_dir`; returns the manifest as JSON text.
#[pyfunction]
#[pyo3(signature = (preset, out_dir, n_train=20, n_test=5, steps=None, resolution=None, seed=None))]
fn generate(
    preset: &str,
    out_dir: &str,
    n_train: usize,
    n_test: usize,
    steps: Option<usize>,
    resolution: Option<usize>,
    seed: Option<u64>,
) -> PyResult<String> {
    let spec = spec_for(preset, steps, resolution, seed)?;
    let m = generate_dataset(&spec, n_train, n_test, Path::new(out_dir)).py()?;
    serde_json::to_string(&m).map_err(|e| err(e.into()))
}

/// Learning rate at `step` of the plateau-then-geometric schedule.
#[pyfunction]
#[pyo3(signature = (step, total_steps, decay_start, lr_max=1e-4, lr_min=1e-6))]
fn learning_rate(step: u64, total_steps: u64, decay_start: u64, lr_max: f64, lr_min: f64) -> f64 {
    let cfg = TrainConfig {
        total_steps,
        decay_start,
        lr_max,
        lr_min,
        ..TrainConfig::default()
    };
    lr_at(step, &cfg)
}

#[pyfunction]
fn percent_difference(baseline: f64, result: f64) -> f64 {
    meshmae::eval::percent_difference(baseline, result)
}

#[pyfunction]
fn rmse(pred: Vec<f32>, truth: Vec<f32>) -> PyResult<f64> {
    meshmae::eval::rmse(&pred, &truth).py()
}

/// Closed-form parameter count of the autoencoder for a TOML run config.
#[pyfunction]
fn param_count(config_toml: &str, node_in: usize, edge_in: usize, out: usize) -> PyResult<usize> {
    let run = RunConfig::from_toml(config_toml).py()?;
    Ok(MaskedAutoencoder::param_count(&run.model, &ModelDims { node_in, edge_in, out }))
}

fn summary_dict<'py>(py: Python<'py>, s: &EvalSummary) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("n_trajectories", s.n_trajectories)?;
    d.set_item("rmse_1step", s.rmse_1step)?;
    d.set_item("rmse_all", s.rmse_all)?;
    d.set_item("rmse_all_step_mean", s.rmse_all_step_mean)?;
    Ok(d)
}

fn split_of<'a>(ds: &'a Dataset, split: &str) -> PyResult<&'a [Trajectory]> {
    match split {
        "train" => Ok(&ds.train),
        "test" => Ok(&ds.test),
        _ => Err(PyValueError::new_err("split must be 'train' or 'test'")),
    }
}

/// Rolls out a saved checkpoint on a dataset split.
#[pyfunction]
#[pyo3(signature = (checkpoint, dataset, split="test"))]
fn evaluate_checkpoint<'py>(
    py: Python<'py>,
    checkpoint: &str,
    dataset: &PyDataset,
    split: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let sim = EncoderSimulator::from_checkpoint(&Checkpoint::read(Path::new(checkpoint)).py()?).py()?;
    let results = evaluate(&sim, split_of(&dataset.0, split)?, RolloutOptions::default()).py()?;
    summary_dict(py, &summarize_rollouts(&results))
}

/// Pretraining or finetuning run over one or more datasets.
#[pyclass(name = "Trainer")]
struct PyTrainer(Trainer);

#[pymethods]
impl PyTrainer {
    /// `config_toml` holds `[model]` and `[train]` sections; `init` copies
    /// parameters from another trainer (e.g. pretrained weights).
    #[new]
    #[pyo3(signature = (config_toml, datasets, init=None))]
    fn new(config_toml: &str, datasets: Vec<PyRef<'_, PyDataset>>, init: Option<PyRef<'_, PyTrainer>>) -> PyResult<Self> {
        let run = RunConfig::from_toml(config_toml).py()?;
        let ds: Vec<Arc<Dataset>> = datasets.iter().map(|d| d.0.clone()).collect();
        let t = match init {
            Some(src) => Trainer::from_params(run, ds, &src.0.store).py()?,
            None => Trainer::new(run, ds).py()?,
        };
        Ok(Self(t))
    }

    /// Continues a saved run.
    #[staticmethod]
    fn resume(checkpoint: &str, datasets: Vec<PyRef<'_, PyDataset>>) -> PyResult<Self> {
        let ck = Checkpoint::read(Path::new(checkpoint)).py()?;
        Ok(Self(Trainer::resume(&ck, datasets.iter().map(|d| d.0.clone()).collect()).py()?))
    }

    /// One optimizer update; returns the batch loss.
    fn step(&mut self, py: Python<'_>) -> PyResult<f64> {
        let t = &mut self.0;
        py.detach(|| t.train_step()).py()
    }

    /// Trains to `total_steps`, writing checkpoint and metrics into `out_dir`.
    #[pyo3(signature = (out_dir=None))]
    fn run(&mut self, py: Python<'_>, out_dir: Option<String>) -> PyResult<()> {
        let t = &mut self.0;
        py.detach(|| t.run(out_dir.as_deref().map(Path::new))).py()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(Path::new(path)).py()
    }

    #[getter]
    fn step_count(&self) -> u64 {
        self.0.step
    }

    #[getter]
    fn losses(&self) -> Vec<f64> {
        self.0.log.iter().map(|r| r.loss).collect()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.0.store.count()
    }

    #[getter]
    fn config_toml(&self) -> PyResult<String> {
        self.0.run.to_toml().py()
    }

    /// Feature layout as `(node_width, n_fields)`.
    #[getter]
    fn layout(&self) -> (usize, usize) {
        let l: FeatureLayout = self.0.layout;
        (l.width(), l.n_fields)
    }

    /// Rolls out the current encoder on a dataset split.
    #[pyo3(signature = (dataset, split="test"))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset, split: &str) -> PyResult<Bound<'py, PyDict>> {
        let sim = EncoderSimulator::from_trainer(&self.0);
        let trajs = split_of(&dataset.0, split)?;
        let results = py.detach(|| evaluate(&sim, trajs, RolloutOptions::default())).py()?;
        summary_dict(py, &summarize_rollouts(&results))
    }
}

#[pymodule]
#[pyo3(name = "meshmae")]
fn meshmae_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MeshmaeError", m.py().get_type::<MeshmaeError>())?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(mask, m)?)?;
    m.add_function(wrap_pyfunction!(partition, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(learning_rate, m)?)?;
    m.add_function(wrap_pyfunction!(percent_difference, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_checkpoint, m)?)?;
    Ok(())
}
