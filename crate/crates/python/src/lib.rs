//! Python bindings for the trackdepth core.
//!
//! Images and maps cross the boundary as `(flat data, shape)` pairs in
//! channel-first order; reports come back as plain dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use trackdepth::checkpoint::Checkpoint;
use trackdepth::dataset::load_dataset;
use trackdepth::evalmetrics;
use trackdepth::geometry::{self, Intrinsics, Pose6DoF};
use trackdepth::losses::{self, LossWeights};
use trackdepth::model::{ArchConfig, Model};
use trackdepth::synthworld::{self, CameraMode, GenConfig};
use trackdepth::trainer::{self, Strategy, TrainConfig, TrainState};
use trackdepth::{BoxXywh, Error, Tensor};

type Array = (Vec<f64>, Vec<usize>);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyFileNotFoundError::new_err(e.to_string()),
        Error::NonFinite { .. } | Error::UndefinedLoss(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tensor(a: Array) -> PyResult<Tensor> {
    Tensor::new(a.1, a.0).map_err(py_err)
}

fn array(t: Tensor) -> Array {
    let shape = t.shape().to_vec();
    (t.into_data(), shape)
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_strategy(s: &str) -> PyResult<Strategy> {
    s.parse().map_err(py_err)
}

fn arch_named(name: &str) -> PyResult<ArchConfig> {
    match name {
        "tiny" => Ok(ArchConfig::tiny()),
        "desk" => Ok(ArchConfig::desk()),
        "default" => Ok(ArchConfig::default()),
        _ => Err(PyValueError::new_err(format!("unknown architecture {name:?}"))),
    }
}

#[pyclass(name = "Intrinsics", from_py_object)]
#[derive(Clone)]
struct PyIntrinsics(Intrinsics);

#[pymethods]
impl PyIntrinsics {
    #[new]
    fn new(focal: f64, cx: f64, cy: f64, width: usize, height: usize) -> PyResult<Self> {
        Intrinsics::new(focal, cx, cy, width, height).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn pseudo(width: usize, height: usize) -> Self {
        Self(Intrinsics::pseudo(width, height))
    }

    #[getter]
    fn focal(&self) -> f64 {
        self.0.focal
    }

    #[getter]
    fn principal_point(&self) -> (f64, f64) {
        (self.0.cx, self.0.cy)
    }

    #[getter]
    fn size(&self) -> (usize, usize) {
        (self.0.width, self.0.height)
    }

    fn __repr__(&self) -> String {
        let k = &self.0;
        format!("Intrinsics(focal={}, cx={}, cy={}, width={}, height={})", k.focal, k.cx, k.cy, k.width, k.height)
    }
}

#[pyclass(name = "Pose", from_py_object)]
#[derive(Clone)]
struct PyPose(Pose6DoF);

#[pymethods]
impl PyPose {
    #[new]
    #[pyo3(signature = (rotation = [0.0; 3], translation = [0.0; 3]))]
    fn new(rotation: [f64; 3], translation: [f64; 3]) -> PyResult<Self> {
        Pose6DoF::new(rotation, translation).map(Self).map_err(py_err)
    }

    #[getter]
    fn rotation(&self) -> [f64; 3] {
        self.0.rotation
    }

    #[getter]
    fn translation(&self) -> [f64; 3] {
        self.0.translation
    }

    /// Row-major 4×4 homogeneous matrix.
    fn matrix(&self) -> PyResult<Vec<Vec<f64>>> {
        let m = self.0.to_matrix().map_err(py_err)?;
        Ok(m.iter().map(|r| r.to_vec()).collect())
    }

    fn apply(&self, point: [f64; 3]) -> [f64; 3] {
        self.0.apply(point)
    }

    fn compose(&self, other: &PyPose) -> Self {
        Self(self.0.compose(&other.0))
    }

    fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    fn __repr__(&self) -> String {
        format!("Pose(rotation={:?}, translation={:?})", self.0.rotation, self.0.translation)
    }
}

#[pyclass(name = "Model", unsendable)]
struct PyModel(Model);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (arch = "tiny", seed = 0))]
    fn new(arch: &str, seed: u64) -> PyResult<Self> {
        Model::new(arch_named(arch)?, seed).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Checkpoint::load(&path).map(|c| Self(c.model)).map_err(py_err)
    }

    fn save(&self, path: PathBuf, strategy: &str) -> PyResult<()> {
        let state = TrainState::new(self.0.clone(), parse_strategy(strategy)?);
        let cfg = TrainConfig {
            arch: self.0.arch.clone(),
            ..TrainConfig::default()
        };
        Checkpoint::from_state(&state, &cfg).save(&path).map_err(py_err)
    }

    fn export_inference(&self) -> Self {
        Self(self.0.export_inference())
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.0.param_count()
    }

    #[getter]
    fn has_depth_head(&self) -> bool {
        self.0.has_depth_head()
    }

    #[getter]
    fn input_side(&self) -> usize {
        self.0.arch.input_side
    }

    #[getter]
    fn template_side(&self) -> usize {
        self.0.arch.template_side
    }

    /// Normalized `[x, y, w, h]` box in search-crop units.
    fn track(&self, template: Array, search: Array) -> PyResult<[f64; 4]> {
        let out = self.0.track(&tensor(template)?, &tensor(search)?).map_err(py_err)?;
        Ok(out.bbox.to_array())
    }

    /// Box plus depth maps at the search resolution, coarse to fine.
    fn track_and_depth(&self, template: Array, search: Array) -> PyResult<([f64; 4], Vec<Array>)> {
        let search = tensor(search)?;
        let side = search.shape().last().copied().unwrap_or(0);
        let (out, disp) = self.0.track_and_depth(&tensor(template)?, &search).map_err(py_err)?;
        let depth = trackdepth::model::depth_at(&disp, side).map_err(py_err)?;
        Ok((out.bbox.to_array(), depth.into_iter().map(array).collect()))
    }

    fn pose(&self, from: Array, to: Array) -> PyResult<PyPose> {
        self.0.pose_net(&tensor(from)?, &tensor(to)?).map(PyPose).map_err(py_err)
    }
}

#[pyfunction]
fn backproject(depth: Array, k: &PyIntrinsics) -> PyResult<Array> {
    geometry::backproject(&tensor(depth)?, &k.0).map(array).map_err(py_err)
}

/// Returns pixel coordinates `[2, H, W]` and the in-front mask.
#[pyfunction]
fn project(points: Array, k: &PyIntrinsics) -> PyResult<(Array, Array)> {
    let (c, v) = geometry::project(&tensor(points)?, &k.0).map_err(py_err)?;
    Ok((array(c), array(v)))
}

/// Warps `src` into the target view. Returns the image and validity mask.
#[pyfunction]
fn reconstruct(src: Array, depth: Array, pose: &PyPose, k: &PyIntrinsics) -> PyResult<(Array, Array)> {
    let (img, valid) = geometry::reconstruct(&tensor(src)?, &tensor(depth)?, &pose.0, &k.0).map_err(py_err)?;
    Ok((array(img), array(valid)))
}

#[pyfunction]
fn ssim(a: Array, b: Array) -> PyResult<Array> {
    losses::ssim(&tensor(a)?, &tensor(b)?).map(array).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (reference, candidate, beta = 0.85))]
fn photometric_error(reference: Array, candidate: Array, beta: f64) -> PyResult<Array> {
    losses::photometric_error(&tensor(reference)?, &tensor(candidate)?, beta)
        .map(array)
        .map_err(py_err)
}

#[pyfunction]
fn giou_loss(pred: [f64; 4], target: [f64; 4]) -> PyResult<f64> {
    losses::giou_loss(BoxXywh::from_array(pred), BoxXywh::from_array(target)).map_err(py_err)
}

#[pyfunction]
fn tracking_loss(pred: [f64; 4], target: [f64; 4]) -> PyResult<f64> {
    losses::tracking_loss(BoxXywh::from_array(pred), BoxXywh::from_array(target), &LossWeights::default())
        .map_err(py_err)
}

#[pyfunction]
fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    evalmetrics::iou(&BoxXywh::from_array(a), &BoxXywh::from_array(b))
}

#[pyfunction]
fn success_auc(ious: Vec<f64>) -> PyResult<f64> {
    evalmetrics::success_auc(&ious).map_err(py_err)
}

/// `(AO, SR@0.5, SR@0.75)` in percent.
#[pyfunction]
fn ao_sr(ious: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    evalmetrics::ao_sr(&ious).map_err(py_err)
}

/// Full tracking report for predicted and ground-truth `[x, y, w, h]` boxes.
#[pyfunction]
fn track_metrics<'py>(py: Python<'py>, pred: Vec<[f64; 4]>, gt: Vec<[f64; 4]>) -> PyResult<Bound<'py, PyAny>> {
    let pred: Vec<BoxXywh> = pred.into_iter().map(BoxXywh::from_array).collect();
    let gt: Vec<BoxXywh> = gt.into_iter().map(BoxXywh::from_array).collect();
    to_py(py, &evalmetrics::track_metrics(&pred, &gt).map_err(py_err)?)
}

#[pyfunction]
fn depth_eval<'py>(py: Python<'py>, pred: Array, gt: Array, pad_mask: Array) -> PyResult<Bound<'py, PyAny>> {
    let r = evalmetrics::depth_eval(&tensor(pred)?, &tensor(gt)?, &tensor(pad_mask)?).map_err(py_err)?;
    to_py(py, &r)
}

/// Renders a synthetic dataset to `out_dir` and returns its manifest.
#[pyfunction]
#[pyo3(signature = (out_dir, seqs = 8, frames = 60, seed = 0, camera = "moving"))]
fn synth_gen<'py>(
    py: Python<'py>,
    out_dir: PathBuf,
    seqs: usize,
    frames: usize,
    seed: u64,
    camera: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let mode: CameraMode = camera.parse().map_err(py_err)?;
    let m = synthworld::generate_dataset(&GenConfig::new(seqs, frames, seed, mode), &out_dir).map_err(py_err)?;
    to_py(py, &m)
}

/// Ground-truth warp check over every adjacent frame pair of a dataset.
#[pyfunction]
fn warp_oracle<'py>(py: Python<'py>, data: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let ds = load_dataset(&data).map_err(py_err)?;
    let mut pairs = Vec::new();
    for seq in &ds.sequences {
        pairs.extend(synthworld::warp_check_sequence(seq).map_err(py_err)?);
    }
    to_py(py, &pairs)
}

/// Trains from scratch and returns the per-step log.
#[pyfunction]
#[pyo3(signature = (data, strategy, steps, out = None, seed = 0, arch = "desk"))]
fn train<'py>(
    py: Python<'py>,
    data: PathBuf,
    strategy: &str,
    steps: u64,
    out: Option<PathBuf>,
    seed: u64,
    arch: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let strategy = parse_strategy(strategy)?;
    let mut cfg = TrainConfig::desk();
    cfg.arch = arch_named(arch)?;
    cfg.sample.search_side = cfg.arch.input_side;
    cfg.sample.template_side = cfg.arch.template_side;
    cfg.total_steps = steps;
    cfg.seed = seed;
    let ds = load_dataset(&data).map_err(py_err)?;
    let model = Model::new(cfg.arch.clone(), seed).map_err(py_err)?;
    let outcome = trainer::train_loop(&ds, TrainState::new(model, strategy), &cfg, out.as_deref(), |_| {})
        .map_err(py_err)?;
    to_py(py, &outcome.log)
}

/// Tracking metrics of a checkpoint on a dataset, skipping frame 0.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, ckpt: PathBuf, data: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let model = Checkpoint::load(&ckpt).map_err(py_err)?.model;
    let ds = load_dataset(&data).map_err(py_err)?;
    let mut cfg = TrainConfig::desk().sample.without_augmentation();
    cfg.search_side = model.arch.input_side;
    cfg.template_side = model.arch.template_side;
    to_py(py, &evalmetrics::evaluate_tracking(&model, &ds, &cfg).map_err(py_err)?)
}

#[pyfunction]
#[pyo3(signature = (seed = 0, flip_sign = false))]
fn gradcheck<'py>(py: Python<'py>, seed: u64, flip_sign: bool) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &trackdepth::gradcheck::run(seed, flip_sign).map_err(py_err)?)
}

#[pymodule]
fn trackdepth_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyIntrinsics>()?;
    m.add_class::<PyPose>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(backproject, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(photometric_error, m)?)?;
    m.add_function(wrap_pyfunction!(giou_loss, m)?)?;
    m.add_function(wrap_pyfunction!(tracking_loss, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(success_auc, m)?)?;
    m.add_function(wrap_pyfunction!(ao_sr, m)?)?;
    m.add_function(wrap_pyfunction!(track_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(depth_eval, m)?)?;
    m.add_function(wrap_pyfunction!(synth_gen, m)?)?;
    m.add_function(wrap_pyfunction!(warp_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
