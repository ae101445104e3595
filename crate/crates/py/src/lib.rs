//! Python bindings for the segmentation toolkit: scene synthesis, the tiny
//! hierarchical transformer, the combined loss, tiled inference, and IoU
//! aggregation.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use dasegformer_core::datamodel::{
    generate_synthetic_scene, ClassTable, Image, LabelMask, LogitMap, SynthSpec, IGNORE_ID,
};
use dasegformer_core::error::Error;
use dasegformer_core::losses::{total_loss as core_total_loss, DiceConfig, OhemConfig};
use dasegformer_core::metrics::{self, UndefinedPolicy};
use dasegformer_core::model::{
    init_parameters, load_checkpoint, model_forward, save_checkpoint, validate_against_config,
    CheckpointDtype, ModelConfig, ParameterSet, SegmentationModel,
};
use dasegformer_core::tiler::{argmax_mask, tiled_inference, TileSpec};

fn err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Validation(_) | Error::Shape(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn image_from_flat(data: Vec<f64>, height: usize, width: usize) -> PyResult<Image> {
    if data.len() != height * width * 3 {
        return Err(PyValueError::new_err(format!(
            "image data length {} != {height}*{width}*3 (channel-planar layout expected)",
            data.len()
        )));
    }
    Ok(Image {
        height,
        width,
        channels: 3,
        data,
    })
}

/// Sliding-window origins for an image: returns (origins, overlap_min).
#[pyfunction]
fn plan_tiles(
    height: usize,
    width: usize,
    tile_size: usize,
    stride: usize,
) -> PyResult<Vec<(usize, usize)>> {
    let spec = TileSpec { tile_size, stride };
    let grid = dasegformer_core::tiler::plan_tiles(height, width, &spec).map_err(err)?;
    Ok(grid.origins)
}

/// Mean of per-class IoUs; `None` entries are undefined classes, handled per
/// `policy` ("exclude" or "as_zero").
#[pyfunction]
#[pyo3(signature = (ious, policy = "exclude"))]
fn mean_iou(ious: Vec<Option<f64>>, policy: &str) -> PyResult<Option<f64>> {
    let policy = match policy {
        "exclude" => UndefinedPolicy::Exclude,
        "as_zero" => UndefinedPolicy::AsZero,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown policy '{other}', expected 'exclude' or 'as_zero'"
            )))
        }
    };
    Ok(metrics::mean_iou(&ious, policy))
}

/// Deterministic synthetic scene from the default 11-class recipe.
/// Returns (image_flat_channel_planar, mask_bytes).
#[pyfunction]
#[pyo3(signature = (seed, height = 256, width = 256))]
fn generate_scene(seed: u64, height: usize, width: usize) -> PyResult<(Vec<f64>, Vec<u8>)> {
    let spec = SynthSpec::default_11(height, width);
    let (image, mask) = generate_synthetic_scene(seed, &spec).map_err(err)?;
    Ok((image.data, mask.data))
}

/// Names of the default class table in id order.
#[pyfunction]
fn class_names() -> Vec<String> {
    ClassTable::default_11()
        .classes
        .iter()
        .map(|c| c.name.clone())
        .collect()
}

/// Combined hard-example-mined cross-entropy + Dice objective on one map.
/// Logits are pixel-major (class-contiguous); labels are class ids with 255
/// ignored. Returns (loss_total, loss_ohem, loss_dice, kept_pixels).
#[pyfunction]
#[pyo3(signature = (logits, labels, height, width, num_classes, k = None))]
fn total_loss(
    logits: Vec<f64>,
    labels: Vec<u8>,
    height: usize,
    width: usize,
    num_classes: usize,
    k: Option<usize>,
) -> PyResult<(f64, f64, f64, usize)> {
    if logits.len() != height * width * num_classes {
        return Err(PyValueError::new_err("logits length mismatch"));
    }
    if labels.len() != height * width {
        return Err(PyValueError::new_err("labels length mismatch"));
    }
    let lg = LogitMap {
        height,
        width,
        num_classes,
        data: logits,
    };
    let lb = LabelMask {
        height,
        width,
        data: labels,
    };
    let ohem = OhemConfig {
        k,
        ..Default::default()
    };
    let (report, _) = core_total_loss(
        std::slice::from_ref(&lg),
        std::slice::from_ref(&lb),
        &ohem,
        &DiceConfig::default(),
        IGNORE_ID,
    )
    .map_err(err)?;
    Ok((
        report.loss_total,
        report.loss_ohem,
        report.loss_dice,
        report.kept_pixel_count,
    ))
}

/// The tiny hierarchical mix-transformer with seeded weights.
#[pyclass]
struct Model {
    config: ModelConfig,
    params: ParameterSet,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (num_classes = 11, seed = 0))]
    fn new(num_classes: usize, seed: u64) -> PyResult<Self> {
        let config = ModelConfig::mit_nano(num_classes);
        let params = init_parameters(&config, seed).map_err(err)?;
        Ok(Model { config, params })
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf, num_classes: usize) -> PyResult<Self> {
        let (params, _, _) = load_checkpoint(&path).map_err(err)?;
        let config = ModelConfig::mit_nano(num_classes);
        validate_against_config(&params, &config).map_err(err)?;
        Ok(Model { config, params })
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        save_checkpoint(
            &self.params,
            &self.config.fingerprint(),
            CheckpointDtype::F64,
            &path,
        )
        .map_err(err)
    }

    fn num_parameters(&self) -> usize {
        self.params.total_parameters()
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Full-resolution logits, pixel-major (class-contiguous).
    fn forward(&self, image: Vec<f64>, height: usize, width: usize) -> PyResult<Vec<f64>> {
        let img = image_from_flat(image, height, width)?;
        let logits = model_forward(&img, &self.config, &self.params).map_err(err)?;
        Ok(logits.data)
    }

    /// Sliding-window inference with overlap averaging; returns the argmax
    /// class-id mask as bytes.
    #[pyo3(signature = (image, height, width, tile_size = 128, stride = 96, workers = 1))]
    fn predict_tiled(
        &self,
        image: Vec<f64>,
        height: usize,
        width: usize,
        tile_size: usize,
        stride: usize,
        workers: usize,
    ) -> PyResult<Vec<u8>> {
        let img = image_from_flat(image, height, width)?;
        let model =
            SegmentationModel::new(self.config.clone(), self.params.clone()).map_err(err)?;
        let spec = TileSpec { tile_size, stride };
        let probs = tiled_inference(&model, &img, &spec, workers).map_err(err)?;
        Ok(argmax_mask(&probs).data)
    }
}

#[pymodule]
fn dasegformer(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(plan_tiles, m)?)?;
    m.add_function(wrap_pyfunction!(mean_iou, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(class_names, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_class::<Model>()?;
    m.add("IGNORE_ID", IGNORE_ID)?;
    Ok(())
}
