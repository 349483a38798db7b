//! Python bindings: configs, boxes, datasets, checkpoints and the harness
//! commands. Structured results come back as plain dicts and lists.

use std::path::PathBuf;

use ciod_core::config::ExperimentConfig;
use ciod_core::data::{self, AnnotationSet, ClassId, ImageId, Instance, Provenance};
use ciod_core::detector::{geometry, hungarian, predict};
use ciod_core::harness::{self, EvaluateOptions, Sweep, TrainOptions};
use ciod_core::prompt::{build_prompt, PromptConfig};
use ciod_core::refiner::RefinerConfig;
use ndarray::Array2;
use pyo3::exceptions::{PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn py_err(e: ciod_core::Error) -> PyErr {
    if e.is_config() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// Serializes through JSON into native Python objects.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Rectangular cost matrix from nested lists.
fn cost_matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("cost rows differ in length"));
    }
    Array2::from_shape_vec((n, m), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyclass(name = "ExperimentConfig", module = "ciod", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// Defaults, then `files` in order, then `KEY=VALUE` overrides.
    #[new]
    #[pyo3(signature = (files = None, overrides = None))]
    fn new(files: Option<Vec<PathBuf>>, overrides: Option<Vec<String>>) -> PyResult<Self> {
        let inner = ExperimentConfig::from_layers(&files.unwrap_or_default(), &overrides.unwrap_or_default())
            .map_err(py_err)?;
        Ok(Self { inner })
    }

    fn with_override(&self, key: &str, value: &str) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.with_override(key, value).map_err(py_err)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(py_err)
    }

    #[getter]
    fn schedule(&self) -> String {
        self.inner.schedule.clone()
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.seeds.clone()
    }

    #[getter]
    fn out_dir(&self) -> PathBuf {
        self.inner.out_dir.clone()
    }

    /// Refiner thresholds from `p_hi` down to `p_lo`.
    fn refiner_thresholds(&self) -> Vec<f64> {
        self.inner.refiner.thresholds()
    }

    fn __repr__(&self) -> String {
        format!(
            "ExperimentConfig(schedule={:?}, seeds={:?}, out_dir={:?})",
            self.inner.schedule, self.inner.seeds, self.inner.out_dir
        )
    }
}

#[pyclass(name = "BBox", module = "ciod", from_py_object)]
#[derive(Clone)]
struct PyBBox {
    inner: data::BBox,
}

#[pymethods]
impl PyBBox {
    #[new]
    fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> PyResult<Self> {
        Ok(Self {
            inner: data::BBox::new(x_min, y_min, x_max, y_max).map_err(py_err)?,
        })
    }

    fn iou(&self, other: &PyBBox) -> f64 {
        self.inner.iou(&other.inner)
    }

    fn giou(&self, other: &PyBBox) -> f64 {
        geometry::giou(&self.inner, &other.inner)
    }

    fn area(&self) -> f64 {
        self.inner.area()
    }

    fn to_list(&self) -> [f64; 4] {
        self.inner.to_array()
    }

    fn __repr__(&self) -> String {
        let [a, b, c, d] = self.inner.to_array();
        format!("BBox({a}, {b}, {c}, {d})")
    }
}

#[pyclass(name = "Dataset", module = "ciod")]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: data::load_dataset(&path).map_err(py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn class_names(&self) -> Vec<String> {
        self.inner.catalog.iter().map(|c| c.name.clone()).collect()
    }

    /// `(class_id, [x_min, y_min, x_max, y_max])` pairs of image `index`.
    fn annotations(&self, index: usize) -> PyResult<Vec<(u32, [f64; 4])>> {
        let r = self
            .inner
            .records
            .get(index)
            .ok_or_else(|| PyIndexError::new_err(format!("image {index} of {}", self.inner.len())))?;
        Ok(r.annotation.instances.iter().map(|i| (i.class_id.0, i.bbox.to_array())).collect())
    }

    fn instance_count(&self) -> usize {
        self.inner.instance_count()
    }
}

#[pyclass(name = "Detector", module = "ciod")]
struct PyDetector {
    inner: ciod_core::detector::Detector,
    catalog: Vec<data::Category>,
}

#[pymethods]
impl PyDetector {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, catalog) = ciod_core::detector::Detector::load(&path).map_err(py_err)?;
        Ok(Self { inner, catalog })
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn class_names(&self) -> Vec<String> {
        self.catalog.iter().map(|c| c.name.clone()).collect()
    }

    /// Detections on image `index` of `dataset` as
    /// `(class_id, score, [x_min, y_min, x_max, y_max])`.
    #[pyo3(signature = (dataset, index, score_threshold = 0.0))]
    fn predict(&self, dataset: &PyDataset, index: usize, score_threshold: f64) -> PyResult<Vec<(u32, f64, [f64; 4])>> {
        let r = dataset
            .inner
            .records
            .get(index)
            .ok_or_else(|| PyIndexError::new_err(format!("image {index} of {}", dataset.inner.len())))?;
        Ok(predict(&self.inner, r, score_threshold)
            .map_err(py_err)?
            .into_iter()
            .map(|d| (d.class_id.0, d.score, d.bbox.to_array()))
            .collect())
    }
}

/// Writes the toy world; returns its manifest.
#[pyfunction]
fn synth_world<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &harness::cmd_synth_world(&config.inner).map_err(py_err)?)
}

/// Trains every phase for every seed; returns per-seed summaries.
#[pyfunction]
#[pyo3(signature = (config, fine_tune_baseline = false, plots = false))]
fn train<'py>(py: Python<'py>, config: &PyConfig, fine_tune_baseline: bool, plots: bool) -> PyResult<Bound<'py, PyAny>> {
    let opts = TrainOptions {
        fine_tune_baseline,
        plots,
    };
    let runs = py.detach(|| harness::cmd_train(&config.inner, &opts)).map_err(py_err)?;
    to_py(py, &runs)
}

#[pyfunction]
#[pyo3(signature = (config, checkpoint, dataset, output, phase = None, old = false, new = false))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    config: &PyConfig,
    checkpoint: PathBuf,
    dataset: PathBuf,
    output: PathBuf,
    phase: Option<usize>,
    old: bool,
    new: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let opts = EvaluateOptions { phase, old, new };
    let f = harness::cmd_evaluate(&config.inner, &checkpoint, &dataset, &opts, &output).map_err(py_err)?;
    to_py(py, &f)
}

/// Runs a sweep (`"components"` or `"key=v1,v2"`); returns the table.
#[pyfunction]
fn ablate<'py>(py: Python<'py>, config: &PyConfig, sweep: &str) -> PyResult<Bound<'py, PyAny>> {
    let sweep = Sweep::parse(sweep).map_err(py_err)?;
    let outcome = py.detach(|| harness::cmd_ablate(&config.inner, &sweep)).map_err(py_err)?;
    to_py(py, &outcome.table)
}

#[pyfunction]
#[pyo3(signature = (config, checkpoint, phase = 1))]
fn refine_only<'py>(py: Python<'py>, config: &PyConfig, checkpoint: PathBuf, phase: usize) -> PyResult<Bound<'py, PyAny>> {
    let reports = py
        .detach(|| harness::cmd_refine_only(&config.inner, &checkpoint, phase))
        .map_err(py_err)?;
    to_py(py, &reports)
}

/// Forgetting percentage points.
#[pyfunction]
fn fpp(ap_old_first: f64, ap_old_final: f64) -> f64 {
    ciod_core::eval::fpp(ap_old_first, ap_old_final)
}

/// Minimum-cost assignment of a rectangular cost matrix as `(row, col)`.
#[pyfunction]
fn hungarian_assignment(cost: Vec<Vec<f64>>) -> PyResult<Vec<(usize, usize)>> {
    Ok(hungarian::min_cost_assignment(&cost_matrix(cost)?))
}

/// Replay prompt for a list of `(class_id, box)` entities over `class_names`.
#[pyfunction]
fn replay_prompt(entities: Vec<(u32, [f64; 4])>, class_names: Vec<String>) -> PyResult<String> {
    let catalog: Vec<data::Category> = class_names
        .into_iter()
        .enumerate()
        .map(|(i, name)| data::Category {
            id: ClassId(i as u32),
            name,
        })
        .collect();
    let instances = entities
        .into_iter()
        .map(|(c, b)| Ok(Instance::new(ClassId(c), data::BBox::from_array(b).map_err(py_err)?)))
        .collect::<PyResult<Vec<_>>>()?;
    let a = AnnotationSet::new(ImageId(0), instances, Provenance::Real);
    Ok(build_prompt(&a, &catalog, &PromptConfig::default()).map_err(py_err)?.positive)
}

/// Default refiner thresholds.
#[pyfunction]
fn default_thresholds() -> Vec<f64> {
    RefinerConfig::default().thresholds()
}

#[pymodule]
fn ciod(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyBBox>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyDetector>()?;
    m.add_function(wrap_pyfunction!(synth_world, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(refine_only, m)?)?;
    m.add_function(wrap_pyfunction!(fpp, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian_assignment, m)?)?;
    m.add_function(wrap_pyfunction!(replay_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(default_thresholds, m)?)?;
    Ok(())
}
