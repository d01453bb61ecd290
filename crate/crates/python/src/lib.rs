//! Python bindings: community graphs, GPVAR simulation, and training runs.

use glocal::cli::{run_training, RunOutcome};
use glocal::config::{build_data, preset, ExperimentConfig, MODEL_PRESETS};
use glocal::gpvar::{self, GpvarParams, ProcessKind};
use glocal::graph::{build_community_graph, normalize_adjacency, Normalization};
use numpy::{IntoPyArray, PyArray1, PyArray2};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyAny;

create_exception!(glocal, GlocalError, PyException);

fn py_err(e: glocal::Error) -> PyErr {
    GlocalError::new_err(e.to_string())
}

fn parse_normalization(name: &str) -> PyResult<Normalization> {
    match name {
        "none" => Ok(Normalization::None),
        "symmetric" => Ok(Normalization::Symmetric),
        "row" => Ok(Normalization::Row),
        other => Err(GlocalError::new_err(format!("unknown normalization {other:?}; use none, symmetric or row"))),
    }
}

fn parse_process(name: &str) -> PyResult<ProcessKind> {
    match name {
        "gpvar" => Ok(ProcessKind::Gpvar),
        "gpvar-l" => Ok(ProcessKind::GpvarL),
        other => Err(GlocalError::new_err(format!("unknown process {other:?}; use gpvar or gpvar-l"))),
    }
}

fn to_python_json<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| GlocalError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Weighted graph over `n_nodes` nodes.
#[pyclass(name = "Graph", module = "glocal", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyGraph {
    inner: glocal::graph::Graph,
}

#[pymethods]
impl PyGraph {
    /// Random community graph, normalized as requested.
    #[staticmethod]
    #[pyo3(signature = (n_communities=20, community_size=6, bridges=1, density=0.6, seed=0, normalization="symmetric"))]
    fn community(
        n_communities: usize,
        community_size: usize,
        bridges: usize,
        density: f64,
        seed: u64,
        normalization: &str,
    ) -> PyResult<Self> {
        let mode = parse_normalization(normalization)?;
        let raw = build_community_graph(n_communities, community_size, bridges, density, seed).map_err(py_err)?;
        let inner = normalize_adjacency(&raw, mode).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Undirected graph from `(i, j, weight)` triples.
    #[staticmethod]
    fn from_edges(n_nodes: usize, edges: Vec<(usize, usize, f64)>) -> PyResult<Self> {
        let inner = glocal::graph::Graph::undirected(n_nodes, &edges).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n_nodes(&self) -> usize {
        self.inner.n_nodes()
    }

    fn normalized(&self, mode: &str) -> PyResult<Self> {
        let inner = normalize_adjacency(&self.inner, parse_normalization(mode)?).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Dense adjacency, `A[dst, src]`.
    fn adjacency<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray2<f64>> {
        self.inner.dense_adjacency().into_pyarray(py)
    }

    fn __repr__(&self) -> String {
        format!("Graph(n_nodes={}, undirected_edges={})", self.inner.n_nodes(), self.inner.n_undirected_edges())
    }
}

/// GPVAR process on a fixed graph.
#[pyclass(name = "Process", module = "glocal", frozen)]
struct PyProcess {
    params: GpvarParams,
    graph: glocal::graph::Graph,
}

#[pymethods]
impl PyProcess {
    /// `kind` is "gpvar" or "gpvar-l"; `seed` draws the node gains of the latter.
    #[new]
    #[pyo3(signature = (graph, kind="gpvar-l", seed=0, sigma=None))]
    fn new(graph: &PyGraph, kind: &str, seed: u64, sigma: Option<f64>) -> PyResult<Self> {
        let mut params = GpvarParams::for_kind(parse_process(kind)?, &graph.inner, seed);
        if let Some(s) = sigma {
            params = GpvarParams::new(params.theta.clone(), params.a.clone(), params.b.clone(), s).map_err(py_err)?;
        }
        Ok(Self { params, graph: graph.inner.clone() })
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.params.sigma
    }

    #[getter]
    fn required_history(&self) -> usize {
        self.params.required_history()
    }

    #[getter]
    fn a<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray1<f64>> {
        self.params.a.clone().into_pyarray(py)
    }

    #[getter]
    fn b<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray1<f64>> {
        self.params.b.clone().into_pyarray(py)
    }

    /// `steps x n_nodes` trajectory after discarding `burn_in` frames.
    #[pyo3(signature = (steps, burn_in=100, seed=0))]
    fn simulate<'py>(&self, py: Python<'py>, steps: usize, burn_in: usize, seed: u64) -> PyResult<Bound<'py, PyArray2<f64>>> {
        let data = py
            .detach(|| gpvar::simulate(&self.params, &self.graph, steps, burn_in, seed))
            .map_err(py_err)?;
        let values = data.values().index_axis(ndarray::Axis(2), 0).to_owned();
        Ok(values.into_pyarray(py))
    }

    /// Conditional mean of the next frame given the latest frames (`k x n_nodes`, oldest first).
    fn predict_next<'py>(
        &self,
        py: Python<'py>,
        recent: numpy::PyReadonlyArray2<'py, f64>,
    ) -> PyResult<Bound<'py, PyArray1<f64>>> {
        let next = gpvar::optimal_predict(&self.params, &self.graph, recent.as_array()).map_err(py_err)?;
        Ok(next.into_pyarray(py))
    }
}

/// Experiment configuration: a preset, optionally overridden by TOML.
#[pyclass(name = "Experiment", module = "glocal")]
struct PyExperiment {
    config: ExperimentConfig,
}

#[pymethods]
impl PyExperiment {
    /// `name` is `[gpvar:|gpvar-l:]model`, e.g. "gpvar-l:tts_iso_emb".
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(Self { config: preset(name).map_err(py_err)? })
    }

    /// Parses a TOML document, layered over `base` when given.
    #[staticmethod]
    #[pyo3(signature = (text, base=None))]
    fn from_toml(text: &str, base: Option<&PyExperiment>) -> PyResult<Self> {
        let config = ExperimentConfig::from_toml(text, base.map(|b| &b.config)).map_err(py_err)?;
        Ok(Self { config })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.config.to_toml().map_err(py_err)
    }

    /// Applies a TOML fragment on top of this configuration.
    fn update(&mut self, text: &str) -> PyResult<()> {
        self.config = ExperimentConfig::from_toml(text, Some(&self.config)).map_err(py_err)?;
        Ok(())
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.config.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.config.seed = seed;
    }

    /// Builds the data, trains, and evaluates. Releases the GIL while running.
    fn train(&self, py: Python<'_>) -> PyResult<PyRun> {
        let mut cfg = self.config.clone();
        let outcome = py
            .detach(move || {
                cfg.resolve_regularization();
                cfg.resolve_seeds();
                cfg.validate().map_err(|e| e.to_string())?;
                let loaded = build_data(&cfg.graph, &cfg.process, cfg.seed, "main").map_err(|e| e.to_string())?;
                run_training(&cfg, &loaded).map_err(|e| format!("{e:#}"))
            })
            .map_err(GlocalError::new_err)?;
        Ok(PyRun { outcome })
    }
}

/// Result of `Experiment.train`.
#[pyclass(name = "Run", module = "glocal", unsendable)]
struct PyRun {
    outcome: RunOutcome,
}

#[pymethods]
impl PyRun {
    /// Report as a dict: sizes, training curve, validation and test metrics.
    fn report<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_python_json(py, &self.outcome.report)
    }

    #[getter]
    fn test_mae(&self) -> f64 {
        self.outcome.report.test.mae
    }

    #[getter]
    fn optimal_test_mae(&self) -> Option<f64> {
        self.outcome.report.optimal_test_mae
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.outcome.report.param_count
    }

    /// Learned node embeddings (mean table), or None for global models.
    fn embeddings<'py>(&self, py: Python<'py>) -> Option<Bound<'py, PyArray2<f32>>> {
        self.outcome.table.as_ref().map(|t| t.mean_table().clone().into_pyarray(py))
    }

    /// Hard cluster assignment of each node, for clustered tables.
    fn cluster_assignments(&self) -> Option<Vec<usize>> {
        self.outcome.table.as_ref().and_then(|t| t.cluster_argmax())
    }
}

/// Expected absolute error of a perfect one-step forecast under noise `sigma`.
#[pyfunction]
fn optimal_mae(sigma: f64) -> f64 {
    gpvar::optimal_mae(sigma)
}

/// Names accepted by `Experiment.preset` after the optional process prefix.
#[pyfunction]
fn presets() -> Vec<&'static str> {
    MODEL_PRESETS.to_vec()
}

#[pymodule(name = "glocal")]
fn glocal_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGraph>()?;
    m.add_class::<PyProcess>()?;
    m.add_class::<PyExperiment>()?;
    m.add_class::<PyRun>()?;
    m.add_function(wrap_pyfunction!(optimal_mae, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add("GlocalError", m.py().get_type::<GlocalError>())?;
    Ok(())
}
