//! Python bindings for `cgnet-core`.

use candle_core::{DType, Device, Tensor};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use cgnet_core::data::{tile_pair, ImagePair};
use cgnet_core::metrics::{self, DatasetStats};
use cgnet_core::model::ModelConfig;
use cgnet_core::render::{self, ErrorMapPalette};
use cgnet_core::trainer::{self, Checkpoint};
use cgnet_core::{cgm, CgNet, Error, Variant};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::Input(_) | Error::Domain(_) | Error::Numeric(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn tensor_err(e: candle_core::Error) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Pixel confusion counts with the changed class as positive.
#[pyclass(name = "ConfusionCounts", module = "cgnet", from_py_object)]
#[derive(Clone, Copy)]
struct PyConfusionCounts {
    inner: metrics::ConfusionCounts,
}

#[pymethods]
impl PyConfusionCounts {
    #[new]
    #[pyo3(signature = (tp = 0, tn = 0, fp = 0, fn_ = 0))]
    fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Self { inner: metrics::ConfusionCounts { tp, tn, fp, fn_ } }
    }

    /// Count two equally long sequences of 0/1 values.
    #[staticmethod]
    fn from_masks(pred: Vec<u8>, gt: Vec<u8>) -> PyResult<Self> {
        Ok(Self { inner: metrics::ConfusionCounts::from_masks(&pred, &gt).map_err(to_py)? })
    }

    #[getter]
    fn tp(&self) -> u64 {
        self.inner.tp
    }
    #[getter]
    fn tn(&self) -> u64 {
        self.inner.tn
    }
    #[getter]
    fn fp(&self) -> u64 {
        self.inner.fp
    }
    #[getter(r#fn)]
    fn fn_(&self) -> u64 {
        self.inner.fn_
    }

    /// Dict with f1, precision, recall and iou.
    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let m = metrics::compute_metrics(&self.inner);
        let d = PyDict::new(py);
        d.set_item("f1", m.f1)?;
        d.set_item("precision", m.precision)?;
        d.set_item("recall", m.recall)?;
        d.set_item("iou", m.iou)?;
        Ok(d)
    }

    fn __add__(&self, other: &Self) -> Self {
        Self { inner: self.inner + other.inner }
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        let c = self.inner;
        format!("ConfusionCounts(tp={}, tn={}, fp={}, fn={})", c.tp, c.tn, c.fp, c.fn_)
    }
}

#[pyfunction]
fn f1_from(precision: f64, recall: f64) -> f64 {
    metrics::f1_from(precision, recall)
}

#[pyfunction]
fn iou_from_f1(f1: f64) -> f64 {
    metrics::iou_from_f1(f1)
}

/// Unchanged-to-changed pixel ratio.
#[pyfunction]
fn imbalance_ratio(changed_pixels: u64, unchanged_pixels: u64) -> PyResult<f64> {
    metrics::imbalance_ratio(&DatasetStats { changed_pixels, unchanged_pixels }).map_err(to_py)
}

#[pyfunction]
fn format_ratio(ratio: f64) -> String {
    metrics::format_ratio(ratio)
}

/// Best epoch from (epoch, val_f1, val_iou) tuples.
#[pyfunction]
fn select_checkpoint(history: Vec<(usize, f64, f64)>) -> PyResult<usize> {
    trainer::select_checkpoint(&history).map_err(to_py)
}

/// Names of the eight ablation variants.
#[pyfunction]
fn variants() -> Vec<&'static str> {
    Variant::ALL.iter().map(|v| v.name()).collect()
}

/// Number of `tile x tile` pieces cut from `pairs` images of `height x width`.
#[pyfunction]
#[pyo3(signature = (height, width, tile = 256, pairs = 1))]
fn tile_count(height: usize, width: usize, tile: usize, pairs: usize) -> PyResult<usize> {
    let probe = ImagePair {
        id: "probe".into(),
        height,
        width,
        t1: vec![0; height * width * 3],
        t2: vec![0; height * width * 3],
        label: vec![0; height * width],
    };
    Ok(tile_pair(&probe, tile).map_err(to_py)?.len() * pairs)
}

/// Row-stochastic attention for flat row-major `[heads, tokens, dim]` inputs.
#[pyfunction]
fn attention_map(q: Vec<f64>, k: Vec<f64>, heads: usize, tokens: usize, dim: usize) -> PyResult<Vec<f64>> {
    let shape = (1, heads, tokens, dim);
    if q.len() != heads * tokens * dim || k.len() != q.len() {
        return Err(PyValueError::new_err(format!(
            "expected {} values for [{heads}, {tokens}, {dim}], got {} and {}",
            heads * tokens * dim,
            q.len(),
            k.len()
        )));
    }
    let q = Tensor::from_vec(q, shape, &Device::Cpu).map_err(tensor_err)?;
    let k = Tensor::from_vec(k, shape, &Device::Cpu).map_err(tensor_err)?;
    let a = cgm::attention_map(&q, &k).map_err(to_py)?;
    a.flatten_all().and_then(|t| t.to_vec1()).map_err(tensor_err)
}

/// RGB bytes colour-coding TP white, TN black, FP red, FN blue.
#[pyfunction]
fn render_error_map<'py>(py: Python<'py>, pred: Vec<u8>, gt: Vec<u8>, height: usize, width: usize) -> PyResult<Bound<'py, PyBytes>> {
    let img = render::render_error_map(&pred, &gt, height, width, &ErrorMapPalette::default()).map_err(to_py)?;
    Ok(PyBytes::new(py, img.as_raw()))
}

/// A change-detection network for one ablation variant.
#[pyclass(name = "Model", module = "cgnet", unsendable)]
struct PyModel {
    inner: CgNet,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (variant = "CGNet", scale = 0.25, seed = 0))]
    fn new(variant: &str, scale: f64, seed: u64) -> PyResult<Self> {
        let v: Variant = variant.parse().map_err(to_py)?;
        let config = ModelConfig { channel_scale: scale, toggles: v.toggles(), ..ModelConfig::default() };
        Ok(Self { inner: CgNet::new(config, seed, DType::F32).map_err(to_py)? })
    }

    /// Load the model stored in a training checkpoint.
    #[staticmethod]
    fn from_checkpoint(path: &str) -> PyResult<Self> {
        let ck = Checkpoint::load(std::path::Path::new(path)).map_err(to_py)?;
        Ok(Self { inner: ck.to_model().map_err(to_py)? })
    }

    #[getter]
    fn variant(&self) -> &'static str {
        Variant::from_toggles(self.inner.config().toggles).name()
    }

    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn cgm_groups(&self) -> usize {
        self.inner.cgm_group_count()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    fn load(&self, path: &str) -> PyResult<()> {
        self.inner.load(path).map_err(to_py)
    }

    /// Predict from two interleaved-RGB byte buffers. Returns the 0/1 mask
    /// as bytes and the change probabilities as a list, both row-major.
    fn predict<'py>(
        &self,
        py: Python<'py>,
        t1: Vec<u8>,
        t2: Vec<u8>,
        height: usize,
        width: usize,
    ) -> PyResult<(Bound<'py, PyBytes>, Vec<f32>)> {
        let pair = ImagePair::new("input", height, width, t1, t2, vec![0; height * width]).map_err(to_py)?;
        let (mask, prob) = trainer::predict_pair(&self.inner, &pair).map_err(to_py)?;
        Ok((PyBytes::new(py, &mask), prob))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(variant={:?}, scale={}, parameters={})",
            self.variant(),
            self.inner.config().channel_scale,
            self.parameter_count()
        )
    }
}

#[pymodule]
fn cgnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfusionCounts>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(f1_from, m)?)?;
    m.add_function(wrap_pyfunction!(iou_from_f1, m)?)?;
    m.add_function(wrap_pyfunction!(imbalance_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(format_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(select_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(variants, m)?)?;
    m.add_function(wrap_pyfunction!(tile_count, m)?)?;
    m.add_function(wrap_pyfunction!(attention_map, m)?)?;
    m.add_function(wrap_pyfunction!(render_error_map, m)?)?;
    Ok(())
}
