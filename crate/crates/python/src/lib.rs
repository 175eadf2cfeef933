//! Python bindings for the graph-matching core.

use graphmatch::affinity::AffinitySet;
use graphmatch::bench::{solver_bench as run_bench, BenchCfg};
use graphmatch::graph::{knn_graph, Graph as CoreGraph, KnnMetric};
use graphmatch::matcher::{gm_solve as core_solve, match_score as core_score, solve_lap as core_lap, Matching, SolverCfg};
use graphmatch::trainer::{parse_json, train_run, TrainConfig};
use graphmatch::uncertainty::{self as uq, default_shift_grid, run_harness, UqConfig};
use graphmatch::{Error, RngStream, Tensor as CoreTensor};
use ndarray::Array2;
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use serde::Serialize;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Format { .. } => PyOSError::new_err(e.to_string()),
        Error::Numeric { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<PyObject> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn config<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    json.map_or_else(|| Ok(T::default()), |s| parse_json(s).map_err(py_err))
}

/// `f32` tensor with the GMT0 on-disk layout.
#[pyclass(module = "graphmatch")]
#[derive(Clone)]
struct Tensor(CoreTensor);

#[pymethods]
impl Tensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        CoreTensor::new(shape, data).map(Tensor).map_err(py_err)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.0.to_bytes())
    }

    #[staticmethod]
    fn from_bytes(bytes: &[u8]) -> PyResult<Self> {
        CoreTensor::from_bytes(bytes).map(Tensor).map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        CoreTensor::load(path).map(Tensor).map_err(py_err)
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

/// Directed graph with a fixed out-degree.
#[pyclass(module = "graphmatch")]
#[derive(Clone)]
struct Graph(CoreGraph);

#[pymethods]
impl Graph {
    #[new]
    fn new(n: usize, edges: Vec<(usize, usize)>) -> PyResult<Self> {
        CoreGraph::from_edges(n, edges).map(Graph).map_err(py_err)
    }

    /// k-nearest-neighbour graph over the rows of `points`.
    #[staticmethod]
    #[pyo3(signature = (points, k, metric = "euclidean"))]
    fn knn(points: Vec<Vec<f64>>, k: usize, metric: &str) -> PyResult<Self> {
        let metric = match metric {
            "euclidean" => KnnMetric::Euclidean,
            "cosine" => KnnMetric::Cosine,
            other => return Err(PyValueError::new_err(format!("unknown metric {other:?}"))),
        };
        knn_graph(matrix(points)?.view(), k, metric).map(Graph).map_err(py_err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n()
    }

    #[getter]
    fn edges(&self) -> Vec<(usize, usize)> {
        self.0.edges().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.num_edges()
    }

    fn __repr__(&self) -> String {
        format!("Graph(n={}, edges={})", self.0.n(), self.0.num_edges())
    }
}

fn affinities(cv: Vec<Vec<f64>>, ce: Vec<Vec<f64>>, gs: &Graph, gt: &Graph) -> PyResult<AffinitySet> {
    let mut ce = matrix(ce)?;
    if ce.is_empty() {
        ce = Array2::zeros((gs.0.num_edges(), gt.0.num_edges()));
    }
    let affs = AffinitySet { cv: matrix(cv)?, ce };
    affs.check(&gs.0, &gt.0).map_err(py_err)?;
    Ok(affs)
}

/// Maximum-weight linear assignment; returns the permutation.
#[pyfunction]
fn solve_lap(cv: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    Ok(core_lap(&matrix(cv)?).map_err(py_err)?.perm().to_vec())
}

/// Second-order graph matching. `ce` is indexed by edge position and may be
/// empty for a vertex-only problem.
#[pyfunction]
#[pyo3(signature = (cv, ce, gs, gt, seed = 0, exact_threshold = 8, restarts = 4, max_sweeps = 50))]
#[allow(clippy::too_many_arguments)]
fn gm_solve(
    cv: Vec<Vec<f64>>,
    ce: Vec<Vec<f64>>,
    gs: &Graph,
    gt: &Graph,
    seed: u64,
    exact_threshold: usize,
    restarts: usize,
    max_sweeps: usize,
) -> PyResult<Vec<usize>> {
    let affs = affinities(cv, ce, gs, gt)?;
    let cfg = SolverCfg {
        exact_threshold,
        restarts,
        max_sweeps,
    };
    let m = core_solve(&affs, &gs.0, &gt.0, &cfg, &mut RngStream::new(seed)).map_err(py_err)?;
    Ok(m.perm().to_vec())
}

#[pyfunction]
fn match_score(perm: Vec<usize>, cv: Vec<Vec<f64>>, ce: Vec<Vec<f64>>, gs: &Graph, gt: &Graph) -> PyResult<f64> {
    let affs = affinities(cv, ce, gs, gt)?;
    let m = Matching::new(perm).map_err(py_err)?;
    core_score(&m, &affs, &gs.0, &gt.0).map_err(py_err)
}

#[pyfunction]
fn ggd_variance(scale: f64, shape: f64) -> f64 {
    graphmatch::math::ggd_variance(scale, shape)
}

#[pyfunction]
fn otsu_threshold(values: Vec<f64>) -> PyResult<f64> {
    uq::otsu_threshold(&values).map_err(py_err)
}

#[pyfunction]
fn dice_score(pred: Vec<Vec<f64>>, gt: Vec<Vec<f64>>) -> PyResult<f64> {
    uq::dice_score(&matrix(pred)?, &matrix(gt)?).map_err(py_err)
}

#[pyfunction]
fn pearson_corr(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    uq::pearson_corr(&xs, &ys).map_err(py_err)
}

/// Self-supervised training; returns the per-step metrics records.
#[pyfunction]
#[pyo3(signature = (config = None, out = None))]
fn train_ssl(py: Python<'_>, config: Option<&str>, out: Option<&str>) -> PyResult<PyObject> {
    let cfg: TrainConfig = self::config(config)?;
    let outcome = py
        .allow_threads(|| train_run(&cfg, out.map(std::path::Path::new), None))
        .map_err(py_err)?;
    to_py(py, &outcome.records)
}

/// Trains the uncertainty head and evaluates it over the default shift grid.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn uq_harness(py: Python<'_>, config: Option<&str>) -> PyResult<PyObject> {
    let cfg: UqConfig = self::config(config)?;
    let (_, report) = py.allow_threads(|| run_harness(&cfg, &default_shift_grid())).map_err(py_err)?;
    to_py(py, &report)
}

#[pyfunction]
#[pyo3(signature = (max_n = 8, instances = 3, seed = 0))]
fn solver_bench(py: Python<'_>, max_n: usize, instances: usize, seed: u64) -> PyResult<PyObject> {
    let cfg = BenchCfg {
        max_n,
        instances,
        seed,
        ..Default::default()
    };
    let rows = py.allow_threads(|| run_bench(&cfg)).map_err(py_err)?;
    to_py(py, &rows)
}

#[pymodule]
#[pyo3(name = "graphmatch")]
fn graphmatch_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Tensor>()?;
    m.add_class::<Graph>()?;
    m.add_function(wrap_pyfunction!(solve_lap, m)?)?;
    m.add_function(wrap_pyfunction!(gm_solve, m)?)?;
    m.add_function(wrap_pyfunction!(match_score, m)?)?;
    m.add_function(wrap_pyfunction!(ggd_variance, m)?)?;
    m.add_function(wrap_pyfunction!(otsu_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(dice_score, m)?)?;
    m.add_function(wrap_pyfunction!(pearson_corr, m)?)?;
    m.add_function(wrap_pyfunction!(train_ssl, m)?)?;
    m.add_function(wrap_pyfunction!(uq_harness, m)?)?;
    m.add_function(wrap_pyfunction!(solver_bench, m)?)?;
    Ok(())
}
