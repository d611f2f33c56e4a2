//! Python bindings: corpus generation, dataset loading and statistics,
//! alignment targets, the learning-rate schedule, and checkpoint inference.
//! Structured results cross the boundary as Python dicts built from JSON.

use std::path::PathBuf;

use pag_cli::pipeline::{self, Bundle};
use pag_core::dataset::{build_gt_alignment, canonical_json, soft_targets, DatasetStats, GroundingSample};
use pag_core::error::Error;
use pag_core::eval::EvalMode;
use pag_core::scenegen::{CorpusConfig, Scene};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Load(_) => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Validation(_) | Error::Dimension(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = canonical_json(value).map_err(py_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

/// `lr0 * decay ** (epoch // every)`.
#[pyfunction]
#[pyo3(signature = (epoch, lr0 = 1e-4, decay = 0.65, every = 10))]
fn lr_at(epoch: usize, lr0: f64, decay: f64, every: usize) -> f64 {
    pag_core::training::lr_at(epoch, lr0, decay, every)
}

/// Derived statistics from raw counts.
#[pyfunction]
fn stats_from_counts(py: Python<'_>, sentences: usize, phrases: usize, phrase_tokens: usize) -> PyResult<Bound<'_, PyAny>> {
    let s = DatasetStats::from_counts(sentences, phrases, phrase_tokens).map_err(py_err)?;
    to_py(py, &s)
}

/// Writes a synthetic corpus to `out`; returns `(scenes, samples)`.
#[pyfunction]
#[pyo3(signature = (out, scenes, samples, seed = 0, hard_frac = None, viewdep_frac = None))]
fn generate(
    out: PathBuf,
    scenes: usize,
    samples: usize,
    seed: u64,
    hard_frac: Option<f64>,
    viewdep_frac: Option<f64>,
) -> PyResult<(usize, usize)> {
    let mut cfg = CorpusConfig::new(scenes, samples, seed);
    cfg.hard_frac = hard_frac;
    cfg.viewdep_frac = viewdep_frac;
    let d = pipeline::generate(&cfg, &out).map_err(py_err)?;
    Ok((d.scenes.len(), d.samples.len()))
}

/// Binary alignment matrix `M x (L + 1)` for a sample given as JSON.
#[pyfunction]
fn gt_alignment(sample_json: &str, num_objects: usize) -> PyResult<Vec<Vec<u8>>> {
    let s: GroundingSample = parse(sample_json, "sample")?;
    let gt = build_gt_alignment(&s, num_objects).map_err(py_err)?;
    Ok((0..gt.num_objects()).map(|m| gt.row(m).to_vec()).collect())
}

/// Row-normalized alignment targets for a sample given as JSON.
#[pyfunction]
fn alignment_targets(sample_json: &str, num_objects: usize) -> PyResult<Vec<Vec<f64>>> {
    let s: GroundingSample = parse(sample_json, "sample")?;
    let gt = build_gt_alignment(&s, num_objects).map_err(py_err)?;
    Ok(soft_targets(&gt).map_err(py_err)?.to_rows())
}

#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: pag_core::dataset::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(PyDataset { inner: pag_core::dataset::Dataset::load(&dir).map_err(py_err)? })
    }

    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }

    fn scene_ids(&self) -> Vec<String> {
        self.inner.scenes.iter().map(|s| s.scene_id.clone()).collect()
    }

    fn class_names(&self) -> Vec<String> {
        self.inner.class_names()
    }

    /// Sample `i` as a dict.
    fn sample<'py>(&self, py: Python<'py>, i: usize) -> PyResult<Bound<'py, PyAny>> {
        let s = self.inner.samples.get(i).ok_or_else(|| PyValueError::new_err(format!("no sample {i}")))?;
        to_py(py, s)
    }

    fn scene<'py>(&self, py: Python<'py>, scene_id: &str) -> PyResult<Bound<'py, PyAny>> {
        let s = self.inner.scene(scene_id).ok_or_else(|| PyValueError::new_err(format!("no scene {scene_id:?}")))?;
        to_py(py, s)
    }

    /// `{"all": ..., "train": ..., "val": ...}` statistics.
    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let (all, train, val) = pipeline::stats(&self.inner).map_err(py_err)?;
        to_py(py, &serde_json::json!({"all": all, "train": train, "val": val}))
    }
}

#[pyclass(name = "Model", frozen)]
struct PyModel {
    bundle: Bundle,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel { bundle: Bundle::load(&path).map_err(py_err)? })
    }

    fn num_parameters(&self) -> usize {
        self.bundle.model.num_parameters()
    }

    fn classes(&self) -> Vec<String> {
        self.bundle.classes.clone()
    }

    /// Grounds `query` in a scene given as JSON: target id, scores, the
    /// chunked phrases with their objects, and the alignment map.
    fn ground<'py>(&self, py: Python<'py>, scene_json: &str, query: &str) -> PyResult<Bound<'py, PyAny>> {
        let scene: Scene = parse(scene_json, "scene")?;
        let g = pipeline::ground(&scene, &self.bundle, query).map_err(py_err)?;
        let dict = to_py(py, &g)?;
        dict.set_item("poa", g.poa)?;
        Ok(dict)
    }

    /// Validation-split report for a dataset directory.
    #[pyo3(signature = (data_dir, mode = "full", seed = 0))]
    fn evaluate<'py>(&self, py: Python<'py>, data_dir: PathBuf, mode: &str, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        let mode: EvalMode = mode.parse().map_err(py_err)?;
        let data = pag_core::dataset::Dataset::load(&data_dir).map_err(py_err)?;
        let report = pipeline::evaluate_split(&data, &self.bundle, mode, seed).map_err(py_err)?;
        to_py(py, &report)
    }
}

#[pymodule]
fn pag_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(stats_from_counts, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(gt_alignment, m)?)?;
    m.add_function(wrap_pyfunction!(alignment_targets, m)?)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
