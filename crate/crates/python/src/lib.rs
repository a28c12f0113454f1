//! Python bindings: region trees, the path-softmax losses, synthetic worlds,
//! training, prediction and the evaluation helpers.

use std::collections::HashMap;
use std::path::PathBuf;

use hmcgeo::eval::{self, CentroidTable, PredictionRecord, Truth};
use hmcgeo::hosts::{generate_synthetic, Dataset, Split, SynthConfig};
use hmcgeo::loss::{self, LossConfig};
use hmcgeo::model::{self, HmcGeo};
use hmcgeo::numerics::{Checkpoint, GradCheckOptions};
use hmcgeo::training::{self, ToyGradCheck, TrainConfig};
use hmcgeo::{Coord, Error, HierarchyTree, LabelVector};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(hmcgeo_py, HmcGeoError, PyException, "Data or numeric failure raised by the core library.");

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => HmcGeoError::new_err(e.to_string()),
    }
}

/// Deserializes an optional Python dict through JSON.
fn from_dict<T: serde::de::DeserializeOwned + Default>(py: Python<'_>, d: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let Some(d) = d else { return Ok(T::default()) };
    let text: String = py.import("json")?.call_method1("dumps", (d,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn labels(path: Vec<usize>, tree: &HierarchyTree) -> PyResult<LabelVector> {
    LabelVector::new(path, tree).map_err(to_py)
}

/// Region hierarchy: sizes per granularity (coarsest first) and parent maps.
#[pyclass(name = "Tree", module = "hmcgeo_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTree(HierarchyTree);

#[pymethods]
impl PyTree {
    /// `parents[g - 1][r]` is the parent of region `r` at granularity `g`.
    #[new]
    fn new(sizes: Vec<usize>, parents: Vec<Vec<usize>>) -> PyResult<Self> {
        HierarchyTree::from_parents(sizes, &parents).map(PyTree).map_err(to_py)
    }

    #[getter]
    fn sizes(&self) -> Vec<usize> {
        self.0.sizes().to_vec()
    }

    #[getter]
    fn total_regions(&self) -> usize {
        self.0.total_regions()
    }

    fn parent_maps(&self) -> Vec<Vec<usize>> {
        self.0.parent_maps()
    }

    /// Local ids of the root-to-leaf path ending at `leaf`.
    fn path(&self, leaf: usize) -> PyResult<Vec<usize>> {
        if leaf >= self.0.leaf_count() {
            return Err(PyValueError::new_err(format!("leaf {leaf} out of range")));
        }
        Ok(self.0.path(leaf))
    }

    fn is_path(&self, ids: Vec<usize>) -> bool {
        self.0.is_path(&ids)
    }

    fn __repr__(&self) -> String {
        format!("Tree(sizes={:?})", self.0.sizes())
    }
}

/// `log Z` of the path-softmax over all root-to-leaf paths.
#[pyfunction]
fn path_partition(scores: Vec<f64>, tree: &PyTree) -> PyResult<f64> {
    loss::path_partition(&scores, &tree.0).map_err(to_py)
}

/// Probability that the path-softmax path passes through each region.
#[pyfunction]
fn path_marginals(scores: Vec<f64>, tree: &PyTree) -> PyResult<Vec<f64>> {
    loss::path_marginals(&scores, &tree.0).map_err(to_py)
}

#[pyfunction]
fn pc_loss(scores: Vec<f64>, path: Vec<usize>, tree: &PyTree) -> PyResult<f64> {
    loss::pc_loss(&scores, &labels(path, &tree.0)?, &tree.0).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (scores, path, tree, lambda_=None))]
fn hierarchical_ce(scores: Vec<f64>, path: Vec<usize>, tree: &PyTree, lambda_: Option<Vec<f64>>) -> PyResult<f64> {
    let lambda = lambda_.unwrap_or_else(|| vec![1.0; tree.0.granularity_count()]);
    loss::hierarchical_ce(&scores, &labels(path, &tree.0)?, &lambda, &tree.0).map_err(to_py)
}

/// `(1 - beta) * hierarchical CE + beta * path loss`.
#[pyfunction]
#[pyo3(signature = (scores, path, tree, beta, lambda_=None))]
fn composite_loss(scores: Vec<f64>, path: Vec<usize>, tree: &PyTree, beta: f64, lambda_: Option<Vec<f64>>) -> PyResult<f64> {
    let lambda = lambda_.unwrap_or_else(|| vec![1.0; tree.0.granularity_count()]);
    let cfg = LossConfig::new(beta, lambda);
    loss::composite_loss(&scores, &labels(path, &tree.0)?, &tree.0, &cfg).map_err(to_py)
}

#[pyfunction]
fn predict_topk(scores: Vec<f64>, tree: &PyTree, k: usize) -> PyResult<Vec<Vec<usize>>> {
    model::predict_topk(&scores, &tree.0, k).map_err(to_py)
}

#[pyfunction]
fn decode_consistent_path(scores: Vec<f64>, tree: &PyTree) -> PyResult<Vec<usize>> {
    model::decode_consistent_path(&scores, &tree.0)
        .map(|l| l.per_granularity)
        .map_err(to_py)
}

#[pyfunction]
fn fuse(locals: Vec<f64>, global_scores: Vec<f64>, alpha: f64) -> PyResult<Vec<f64>> {
    model::fuse(&locals, &global_scores, alpha).map_err(to_py)
}

/// Great-circle distance in km between `(lon, lat)` pairs.
#[pyfunction]
fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    eval::haversine_km(Coord::new(a.0, a.1), Coord::new(b.0, b.1))
}

/// Accuracy and macro precision, recall and F1.
#[pyfunction]
fn confusion_metrics(py: Python<'_>, preds: Vec<usize>, truths: Vec<usize>, class_count: usize) -> PyResult<Py<PyDict>> {
    let m = eval::confusion_metrics(&preds, &truths, class_count).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("accuracy", m.accuracy)?;
    d.set_item("macro_precision", m.macro_precision)?;
    d.set_item("macro_recall", m.macro_recall)?;
    d.set_item("macro_f1", m.macro_f1)?;
    Ok(d.unbind())
}

/// Cluster labels (-1 for noise) of `(lon, lat)` points.
#[pyfunction]
fn dbscan_haversine(points: Vec<(f64, f64)>, eps_km: f64, min_samples: usize) -> PyResult<Vec<i64>> {
    let pts: Vec<Coord> = points.iter().map(|&(lon, lat)| Coord::new(lon, lat)).collect();
    hmcgeo::analysis::dbscan_haversine(&pts, eps_km, min_samples).map_err(to_py)
}

/// Finite-difference check of the full model on a toy problem. Returns the
/// maximum relative error over all checked coordinates and over those above
/// the round-off bound.
#[pyfunction]
#[pyo3(signature = (h=1e-5, tol=1e-4, seed=7))]
fn grad_check(py: Python<'_>, h: f64, tol: f64, seed: u64) -> PyResult<Py<PyDict>> {
    let toy = ToyGradCheck {
        seed,
        ..ToyGradCheck::default()
    };
    let opts = GradCheckOptions {
        h,
        tol,
        ..GradCheckOptions::default()
    };
    let r = training::toy_gradient_check(&toy, opts).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("max_rel_error", r.max_rel_error)?;
    d.set_item("max_rel_error_resolved", r.max_rel_error_resolved)?;
    d.set_item("checked", r.checked)?;
    d.set_item("unresolved", r.unresolved)?;
    d.set_item("passed", r.passed())?;
    Ok(d.unbind())
}

/// A generated dataset: nested rectangular regions and clustered hosts.
#[pyclass(name = "World", module = "hmcgeo_py", frozen)]
struct PyWorld {
    world: hmcgeo::hosts::SyntheticWorld,
}

#[pymethods]
impl PyWorld {
    #[getter]
    fn tree(&self) -> PyTree {
        PyTree(self.world.tree.clone())
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.world.feature_dim()
    }

    fn __len__(&self) -> usize {
        self.world.hosts.len()
    }

    /// Host ip addresses in file order.
    fn ips(&self) -> Vec<String> {
        self.world.hosts.iter().map(|h| h.ip.clone()).collect()
    }

    /// Planted root-to-leaf path of every host.
    fn labels(&self) -> Vec<Vec<usize>> {
        self.world.truth.host_labels.iter().map(|l| l.per_granularity.clone()).collect()
    }

    /// `"train"` or `"test"` for every host.
    fn splits(&self) -> Vec<&'static str> {
        self.world.hosts.iter().map(|h| h.split.as_str()).collect()
    }

    /// Writes the region files, host table and planted truth into `dir`.
    fn write(&self, dir: PathBuf) -> PyResult<()> {
        self.world.write(dir).map_err(to_py)
    }
}

/// Generates a synthetic world; `config` keys follow the `[synth]` section
/// of the run configuration.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn synth(py: Python<'_>, config: Option<&Bound<'_, PyDict>>) -> PyResult<PyWorld> {
    let cfg: SynthConfig = from_dict(py, config)?;
    let world = py.detach(|| generate_synthetic(&cfg)).map_err(to_py)?;
    Ok(PyWorld { world })
}

/// A trained model with its feature scaler and fallback path.
#[pyclass(name = "Model", module = "hmcgeo_py", frozen)]
struct PyModel {
    model: HmcGeo,
    history: Vec<training::EpochRecord>,
}

fn dataset(world: &PyWorld) -> PyResult<Dataset> {
    Dataset::new(world.world.hosts.clone()).map_err(to_py)
}

#[pymethods]
impl PyModel {
    /// Trains on the world's train split; `config` keys follow `[train]`.
    #[staticmethod]
    #[pyo3(signature = (world, config=None))]
    fn train(py: Python<'_>, world: &PyWorld, config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg: TrainConfig = from_dict(py, config)?;
        let ds = dataset(world)?;
        let out = py.detach(|| training::train(&ds, &world.world.tree, &cfg)).map_err(to_py)?;
        Ok(PyModel {
            model: out.model,
            history: out.history,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(path).map_err(to_py)?;
        Ok(PyModel {
            model: HmcGeo::from_checkpoint(&ck).map_err(to_py)?,
            history: Vec::new(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.model
            .to_checkpoint(serde_json::Value::Null)
            .and_then(|ck| ck.save(path))
            .map_err(to_py)
    }

    #[getter]
    fn granularity_sizes(&self) -> Vec<usize> {
        self.model.config.granularity_sizes.clone()
    }

    /// Per-epoch `(loss, leaf train accuracy)` of the run that produced the model.
    #[getter]
    fn history(&self) -> Vec<(f64, f64)> {
        self.history
            .iter()
            .map(|r| (r.loss, r.accuracy.last().copied().unwrap_or(f64::NAN)))
            .collect()
    }

    /// Predictions for every test host: dicts with `ip`, `fallback`,
    /// `topk`, `path` and `scores`.
    #[pyo3(signature = (world, k=3))]
    fn predict(&self, py: Python<'_>, world: &PyWorld, k: usize) -> PyResult<Vec<Py<PyDict>>> {
        let records = self.records(world, k)?;
        records
            .into_iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("ip", r.ip)?;
                d.set_item("fallback", r.fallback)?;
                d.set_item("topk", r.topk)?;
                d.set_item("path", r.path)?;
                d.set_item("scores", r.scores)?;
                Ok(d.unbind())
            })
            .collect()
    }

    /// Top-k accuracy per granularity on the test split, keyed by k.
    #[pyo3(signature = (world, ks=vec![1, 2, 3]))]
    fn evaluate(&self, world: &PyWorld, ks: Vec<usize>) -> PyResult<HashMap<usize, Vec<f64>>> {
        let kmax = ks.iter().copied().max().unwrap_or(1);
        let records = self.records(world, kmax)?;
        let truth: HashMap<String, Truth> = world
            .world
            .hosts
            .iter()
            .zip(&world.world.truth.host_labels)
            .map(|(h, l)| {
                (
                    h.ip.clone(),
                    Truth {
                        labels: Some(l.clone()),
                        coord: h.coord,
                    },
                )
            })
            .collect();
        let centroids = world.world.sets.last().map(CentroidTable::new).transpose().map_err(to_py)?;
        let report = eval::evaluate(&records, &truth, &world.world.tree, centroids.as_ref(), &ks).map_err(to_py)?;
        Ok(ks
            .iter()
            .map(|&k| {
                let acc = report
                    .granularities
                    .iter()
                    .map(|g| g.topk.iter().find(|t| t.0 == k).map_or(f64::NAN, |t| t.1))
                    .collect();
                (k, acc)
            })
            .collect())
    }
}

impl PyModel {
    fn records(&self, world: &PyWorld, k: usize) -> PyResult<Vec<PredictionRecord>> {
        let ds = dataset(world)?;
        let tree = &world.world.tree;
        let targets: Vec<usize> = (0..ds.len()).filter(|&i| ds.hosts[i].split == Split::Test).collect();
        training::predict_hosts(&self.model, &ds, tree, &targets)
            .and_then(|preds| {
                preds
                    .into_iter()
                    .map(|p| PredictionRecord::from_scores(&ds.hosts[p.host].ip, p.fallback, p.scores, tree, &world.world.sets, k))
                    .collect()
            })
            .map_err(to_py)
    }
}

#[pymodule]
fn hmcgeo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("HmcGeoError", m.py().get_type::<HmcGeoError>())?;
    m.add_class::<PyTree>()?;
    m.add_class::<PyWorld>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(path_partition, m)?)?;
    m.add_function(wrap_pyfunction!(path_marginals, m)?)?;
    m.add_function(wrap_pyfunction!(pc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(hierarchical_ce, m)?)?;
    m.add_function(wrap_pyfunction!(composite_loss, m)?)?;
    m.add_function(wrap_pyfunction!(predict_topk, m)?)?;
    m.add_function(wrap_pyfunction!(decode_consistent_path, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(haversine_km, m)?)?;
    m.add_function(wrap_pyfunction!(confusion_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(dbscan_haversine, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    Ok(())
}
