use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use rosam::data::load_dataset;
use rosam::infer::{merge_restored, plan_crops as plan, segment_objects, InferenceConfig};
use rosam::loss::{bce_dice_loss, LossWeights};
use rosam::metrics::{self, BoundaryWidth};
use rosam::raster::RgbImage;
use rosam::resample::Interpolation;
use rosam::train::{self as training, load_checkpoint, save_checkpoint, Checkpoint, Phase, TrainConfig};
use rosam::{build_adapted_model, BoxPrompt, Error, Head, MaskGrid, ModelConfig, ModelState};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Input(_) | Error::Config { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> PyResult<T> {
    s.parse().map_err(|_| PyValueError::new_err(format!("unknown {what} `{s}`")))
}

fn mask_from(bytes: &[u8], height: usize, width: usize) -> PyResult<MaskGrid> {
    if bytes.len() != height * width {
        return Err(PyValueError::new_err(format!(
            "mask has {} bytes, expected {height}x{width}",
            bytes.len()
        )));
    }
    Ok(MaskGrid::from_bytes(height, width, bytes))
}

fn boxes_from(boxes: Vec<[f64; 4]>) -> Vec<BoxPrompt> {
    boxes.into_iter().map(BoxPrompt::from_array).collect()
}

/// A segmentation model with LoRA adapters and both decoder heads.
#[pyclass(name = "Model", module = "rosam")]
struct PyModel {
    state: ModelState,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (seed = 0, canvas_size = 256, embed_dim = 64, num_blocks = 4, num_heads = 4, lora_rank = 4))]
    fn new(
        seed: u64,
        canvas_size: usize,
        embed_dim: usize,
        num_blocks: usize,
        num_heads: usize,
        lora_rank: usize,
    ) -> PyResult<Self> {
        let cfg = ModelConfig {
            seed,
            canvas_size,
            embed_dim,
            num_blocks,
            num_heads,
            lora_rank,
            ..ModelConfig::default()
        };
        Ok(PyModel {
            state: build_adapted_model(&cfg).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            state: load_checkpoint(&path).map_err(to_py)?.state,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&Checkpoint::from_state(self.state.clone()), &path).map_err(to_py)
    }

    #[getter]
    fn canvas_size(&self) -> usize {
        self.state.config.canvas_size
    }

    fn num_parameters(&self) -> usize {
        self.state.num_parameters()
    }

    /// Names of the parameters updated during the given phase (`sam` or `hq`).
    fn trainable_parameters(&self, phase: &str) -> PyResult<Vec<String>> {
        let mut state = self.state.clone();
        training::set_trainability(&mut state, parse::<Phase>(phase, "phase")?).map_err(to_py)?;
        Ok(state.trainable.into_iter().filter(|(_, t)| *t).map(|(n, _)| n).collect())
    }

    /// Segments the boxes in an RGB image given as `height*width*3` bytes.
    ///
    /// Returns one dict per box with the mask as `height*width` bytes (0/1),
    /// plus the merged 16-bit label map as a list.
    #[pyo3(signature = (image, height, width, boxes, head = "hq", rate = 2, interp = "bicubic", single = true))]
    #[allow(clippy::too_many_arguments)]
    fn segment<'py>(
        &self,
        py: Python<'py>,
        image: &[u8],
        height: usize,
        width: usize,
        boxes: Vec<[f64; 4]>,
        head: &str,
        rate: usize,
        interp: &str,
        single: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let img = RgbImage::from_raw(width, height, image.to_vec()).map_err(to_py)?;
        let canvas = self.state.config.canvas_size;
        if rate == 0 {
            return Err(PyValueError::new_err("rate must be positive"));
        }
        let cfg = InferenceConfig {
            window_size: canvas / rate,
            sampling_rate: rate,
            interpolation: parse::<Interpolation>(interp, "interpolation")?,
            single_object: single,
            ..InferenceConfig::for_canvas(canvas)
        };
        let head = parse::<Head>(head, "head")?;
        let boxes = boxes_from(boxes);
        for b in &boxes {
            b.validate(width as f64, height as f64).map_err(to_py)?;
        }
        let restored = py
            .detach(|| segment_objects(&self.state, &img, &boxes, &cfg, head))
            .map_err(to_py)?;
        let labels = merge_restored(&restored).map_err(to_py)?;
        let objects = restored
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("mask", PyBytes::new(py, &r.mask.to_bytes()))?;
                d.set_item("area", r.mask.area())?;
                d.set_item("max_logit", r.max_logit())?;
                d.set_item("window_origin", (r.window.origin_x, r.window.origin_y))?;
                d.set_item("window_size", r.window.size)?;
                d.set_item("truncated", r.window.truncated)?;
                Ok(d)
            })
            .collect::<PyResult<Vec<_>>>()?;
        let out = PyDict::new(py);
        out.set_item("objects", objects)?;
        out.set_item("labels", labels)?;
        Ok(out)
    }

    /// Trains in place on a dataset directory; returns the loss history.
    #[pyo3(signature = (data, epochs = 24, batch_size = 2, learning_rate = 1e-3, seed = 0, lsj = true, rotation = true))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        data: PathBuf,
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        seed: u64,
        lsj: bool,
        rotation: bool,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let cfg = TrainConfig {
            epochs,
            batch_size,
            learning_rate,
            seed,
            lsj,
            rotation,
            ..TrainConfig::default()
        };
        let state = self.state.clone();
        let outcome = py
            .detach(|| {
                let items = load_dataset(&data)?
                    .iter()
                    .map(|r| r.load())
                    .collect::<rosam::Result<Vec<_>>>()?;
                training::train(state, &items, &cfg)
            })
            .map_err(to_py)?;
        self.state = outcome.checkpoint.state;
        outcome
            .history
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("step", r.step)?;
                d.set_item("epoch", r.epoch)?;
                d.set_item("phase", r.phase.as_str())?;
                d.set_item("bce", r.bce)?;
                d.set_item("dice", r.dice)?;
                d.set_item("total", r.total)?;
                Ok(d)
            })
            .collect()
    }
}

/// Intersection over union of two `height*width` binary masks.
#[pyfunction]
fn iou(pred: &[u8], gt: &[u8], height: usize, width: usize) -> PyResult<f64> {
    metrics::iou(&mask_from(pred, height, width)?, &mask_from(gt, height, width)?).map_err(to_py)
}

/// Boundary IoU; `d` defaults to 2% of the image diagonal.
#[pyfunction]
#[pyo3(signature = (pred, gt, height, width, d = None))]
fn biou(pred: &[u8], gt: &[u8], height: usize, width: usize, d: Option<usize>) -> PyResult<f64> {
    let d = d.unwrap_or_else(|| metrics::default_boundary_width(height, width));
    metrics::biou(&mask_from(pred, height, width)?, &mask_from(gt, height, width)?, d).map_err(to_py)
}

/// Weighted BCE + Dice of row-major logits against a binary mask.
#[pyfunction]
#[pyo3(signature = (logits, gt, height, width, bce_weight = 1.0, dice_weight = 1.0))]
fn loss(logits: Vec<f32>, gt: &[u8], height: usize, width: usize, bce_weight: f64, dice_weight: f64) -> PyResult<(f64, f64, f64)> {
    if logits.len() != height * width {
        return Err(PyValueError::new_err("logits do not match height*width"));
    }
    let parts = bce_dice_loss(
        &MaskGrid::logits(height, width, logits),
        &mask_from(gt, height, width)?,
        LossWeights {
            bce: bce_weight,
            dice: dice_weight,
        },
    )
    .map_err(to_py)?;
    Ok((parts.bce, parts.dice, parts.total))
}

/// Crop windows for each box as `(origin_x, origin_y, size, truncated)`.
#[pyfunction]
fn plan_crops(boxes: Vec<[f64; 4]>, height: usize, width: usize, window: usize) -> PyResult<Vec<(usize, usize, usize, bool)>> {
    Ok(plan(&boxes_from(boxes), (height, width), window)
        .map_err(to_py)?
        .into_iter()
        .map(|c| (c.origin_x, c.origin_y, c.size, c.truncated))
        .collect())
}

/// Scores a prediction directory against a dataset; returns the summary as JSON text.
#[pyfunction]
#[pyo3(signature = (pred, data, d = None))]
fn evaluate(pred: PathBuf, data: PathBuf, d: Option<usize>) -> PyResult<String> {
    let records = load_dataset(&data).map_err(to_py)?;
    let width = d.map_or(BoundaryWidth::AUTO, BoundaryWidth::Fixed);
    let report = metrics::evaluate(&pred, &records, width).map_err(to_py)?;
    serde_json::to_string(&report.summary).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
#[pyo3(name = "rosam")]
fn rosam_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(biou, m)?)?;
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_function(wrap_pyfunction!(plan_crops, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
