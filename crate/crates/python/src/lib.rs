//! Python bindings: boxes, NMS, AP, fusion, synthetic data and the
//! ensemble model.

use pyo3::exceptions::{PyArithmeticError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use regionnet::data::{self, generate_synthetic, SynthConfig};
use regionnet::geometry::{self, BBox, Detection};
use regionnet::model::{
    self, derived_rng, train_epoch, EnsembleConfig, EnsembleModel, HeadConfig, RegionSource, TrainConfig,
};
use regionnet::nn::{AdamConfig, ProbVector};
use regionnet::roialign::RoiGrid;
use regionnet::{Error, ErrorKind, Tensor};

fn py_err(e: Error) -> PyErr {
    match e.kind() {
        ErrorKind::Numeric => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for regionnet::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Axis-aligned box in center form.
#[pyclass(name = "BBox", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyBBox(BBox);

#[pymethods]
impl PyBBox {
    #[new]
    fn new(x: f64, y: f64, w: f64, h: f64) -> PyResult<Self> {
        BBox::new(x, y, w, h).py().map(PyBBox)
    }

    #[getter]
    fn x(&self) -> f64 {
        self.0.x
    }

    #[getter]
    fn y(&self) -> f64 {
        self.0.y
    }

    #[getter]
    fn w(&self) -> f64 {
        self.0.w
    }

    #[getter]
    fn h(&self) -> f64 {
        self.0.h
    }

    fn area(&self) -> f64 {
        self.0.area()
    }

    fn iou(&self, other: &PyBBox) -> f64 {
        geometry::iou(&self.0, &other.0)
    }

    fn __repr__(&self) -> String {
        format!("BBox(x={}, y={}, w={}, h={})", self.0.x, self.0.y, self.0.w, self.0.h)
    }
}

#[pyclass(name = "Detection", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyDetection(Detection);

#[pymethods]
impl PyDetection {
    #[new]
    fn new(region_class: usize, bbox: PyBBox, score: f64) -> PyResult<Self> {
        Detection::new(region_class, bbox.0, score).py().map(PyDetection)
    }

    #[getter]
    fn region_class(&self) -> usize {
        self.0.region_class
    }

    #[getter]
    fn bbox(&self) -> PyBBox {
        PyBBox(self.0.bbox)
    }

    #[getter]
    fn score(&self) -> f64 {
        self.0.score
    }

    fn __repr__(&self) -> String {
        format!(
            "Detection(region_class={}, bbox={}, score={})",
            self.0.region_class,
            PyBBox(self.0.bbox).__repr__(),
            self.0.score
        )
    }
}

fn unwrap_dets(dets: Vec<PyDetection>) -> Vec<Detection> {
    dets.into_iter().map(|d| d.0).collect()
}

fn wrap_dets(dets: Vec<Detection>) -> Vec<PyDetection> {
    dets.into_iter().map(PyDetection).collect()
}

#[pyfunction]
fn iou(a: PyBBox, b: PyBBox) -> f64 {
    geometry::iou(&a.0, &b.0)
}

/// Greedy per-class NMS.
#[pyfunction]
fn nms_standard(dets: Vec<PyDetection>, iou_threshold: f64) -> Vec<PyDetection> {
    wrap_dets(geometry::nms_standard(&unwrap_dets(dets), iou_threshold))
}

/// Keeps the single best detection of each region class.
#[pyfunction]
fn nms_special(dets: Vec<PyDetection>) -> Vec<PyDetection> {
    wrap_dets(geometry::nms_special(&unwrap_dets(dets)))
}

#[pyfunction]
fn mean_ap(aps: Vec<f64>) -> PyResult<f64> {
    geometry::mean_ap(&aps).py()
}

/// Sums per-head probability vectors and returns `(argmax, sums)`.
#[pyfunction]
fn fuse(probs: Vec<Vec<f64>>) -> PyResult<(usize, Vec<f64>)> {
    let outputs = probs
        .into_iter()
        .enumerate()
        .map(|(i, p)| Ok((i, ProbVector::new(p)?)))
        .collect::<regionnet::Result<Vec<_>>>()
        .py()?;
    let (label, sums) = model::fuse(&outputs).py()?;
    Ok((label.0, sums))
}

/// RoIAlign of a `[C, H, W]` map given as a flat list; returns a flat
/// `[C, out, out]` list.
#[pyfunction]
#[pyo3(signature = (values, shape, bbox, out_size=7, samples_per_bin=2))]
fn roi_align(
    values: Vec<f64>,
    shape: Vec<usize>,
    bbox: PyBBox,
    out_size: usize,
    samples_per_bin: usize,
) -> PyResult<Vec<f64>> {
    let map = Tensor::new(shape, values).py()?;
    let grid = RoiGrid {
        out_h: out_size,
        out_w: out_size,
        samples_per_bin,
    };
    Ok(regionnet::roialign::roi_align(&map, &bbox.0, &grid).py()?.into_data())
}

#[pyclass(name = "Dataset", frozen)]
struct PyDataset(data::Dataset);

#[pymethods]
impl PyDataset {
    /// Seeded synthetic dataset with `samples_per_class` images per class.
    #[staticmethod]
    #[pyo3(signature = (num_classes, num_parts, samples_per_class, image_size, seed=0))]
    fn synthetic(
        num_classes: usize,
        num_parts: usize,
        samples_per_class: usize,
        image_size: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = SynthConfig::new(num_classes, num_parts, samples_per_class, image_size);
        generate_synthetic(&cfg, seed).py().map(PyDataset)
    }

    /// Loads a stored dataset directory; returns `(train, test)`.
    #[staticmethod]
    fn load(dir: std::path::PathBuf) -> PyResult<(PyDataset, PyDataset)> {
        let s = data::load_dataset(&dir).py()?;
        Ok((PyDataset(s.train), PyDataset(s.test)))
    }

    /// Stratified split; returns `(train, test)`.
    #[pyo3(signature = (train_fraction, seed=0))]
    fn split(&self, train_fraction: f64, seed: u64) -> PyResult<(PyDataset, PyDataset)> {
        let (a, b) = data::split(&self.0, train_fraction, &mut derived_rng(seed, &[])).py()?;
        Ok((PyDataset(a), PyDataset(b)))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes
    }

    #[getter]
    fn region_names(&self) -> Vec<String> {
        self.0.region_names.clone()
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.0.image_size
    }

    fn labels(&self) -> Vec<usize> {
        self.0.samples.iter().map(|s| s.label.0).collect()
    }

    /// Flat `[3, S, S]` pixel values in `[0, 1]`.
    fn image(&self, index: usize) -> PyResult<Vec<f32>> {
        Ok(self.sample(index)?.image.data().to_vec())
    }

    /// `(region_class, bbox or None)` for each region class.
    fn regions(&self, index: usize) -> PyResult<Vec<(usize, Option<PyBBox>)>> {
        Ok(self
            .sample(index)?
            .regions
            .iter()
            .map(|r| (r.region_class, r.present.then_some(PyBBox(r.bbox))))
            .collect())
    }
}

impl PyDataset {
    fn sample(&self, index: usize) -> PyResult<&data::AnnotatedSample> {
        self.0
            .samples
            .get(index)
            .ok_or_else(|| PyIndexError::new_err(format!("sample {index} out of range")))
    }
}

/// Shared trunk with one classification head per region.
#[pyclass(name = "Model")]
struct PyModel(EnsembleModel<f32>);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (num_classes, num_regions, image_size, stage_channels=vec![8, 16, 16], hidden_units=32, seed=0))]
    fn new(
        num_classes: usize,
        num_regions: usize,
        image_size: usize,
        stage_channels: Vec<usize>,
        hidden_units: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = EnsembleConfig {
            num_regions,
            num_classes,
            input_size: image_size,
            stage_channels,
            roi: RoiGrid::default(),
            head: HeadConfig {
                residual_kernel: 3,
                hidden_units,
            },
        };
        EnsembleModel::new(cfg, &mut derived_rng(seed, &[])).py().map(PyModel)
    }

    #[getter]
    fn num_heads(&self) -> usize {
        self.0.num_heads()
    }

    /// One epoch of Adam training on ground-truth regions; returns the mean
    /// per-sample loss.
    #[pyo3(signature = (dataset, epoch, lr=1e-3, batch_size=8, seed=0, jitter=true))]
    fn train_epoch(
        &mut self,
        dataset: &PyDataset,
        epoch: u64,
        lr: f64,
        batch_size: usize,
        seed: u64,
        jitter: bool,
    ) -> PyResult<f64> {
        let cfg = TrainConfig {
            epochs: epoch + 1,
            batch_size,
            adam: AdamConfig {
                lr,
                ..AdamConfig::default()
            },
            jitter: jitter.then_some(data::JitterMode::Decided),
            augment: data::AugmentOps::default(),
        };
        Ok(train_epoch(&mut self.0, &dataset.0, &cfg, seed, epoch, |_| {})
            .py()?
            .mean_loss)
    }

    /// Fused prediction for one sample from its ground-truth regions:
    /// `(label, summed probabilities)`.
    fn predict(&self, dataset: &PyDataset, index: usize) -> PyResult<(usize, Vec<f64>)> {
        let s = dataset.sample(index)?;
        let out = self.0.predict_regions(&s.image, &s.regions).py()?;
        let (label, sums) = model::fuse(&out).py()?;
        Ok((label.0, sums))
    }

    /// `{"per_head": [...], "fused": x}` on ground-truth regions.
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset) -> PyResult<Bound<'py, PyDict>> {
        let r = model::evaluate(&dataset.0, &self.0, RegionSource::GroundTruth, None).py()?;
        let d = PyDict::new(py);
        d.set_item("per_head", r.per_head)?;
        d.set_item("fused", r.fused)?;
        Ok(d)
    }

    fn save(&self, path: std::path::PathBuf, epoch: u64) -> PyResult<()> {
        self.0.save(&path, epoch).py()
    }

    /// Loads parameters; returns the stored epoch.
    fn load(&mut self, path: std::path::PathBuf) -> PyResult<u64> {
        self.0.load(&path).py()
    }
}

#[pymodule]
fn regionnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBBox>()?;
    m.add_class::<PyDetection>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(nms_standard, m)?)?;
    m.add_function(wrap_pyfunction!(nms_special, m)?)?;
    m.add_function(wrap_pyfunction!(mean_ap, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(roi_align, m)?)?;
    Ok(())
}
