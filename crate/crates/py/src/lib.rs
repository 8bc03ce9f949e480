//! Python bindings. Arrays cross the boundary as flat row-major lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use fidseg::config::ExperimentConfig;
use fidseg::losses::{softmax_pixelwise, ClassWeights, LossSpec, Reduction};
use fidseg::metrics::{class_ious, extract_centers};
use fidseg::synth::write_dataset;
use fidseg::types::{LabelMap, LogitCube, NormalizedImage, ProbabilityCube, SegMap};
use fidseg::unet::Checkpoint;

fn err(e: fidseg::Error) -> PyErr {
    match e {
        fidseg::Error::Io { .. } | fidseg::Error::Image { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn reduction(name: &str) -> PyResult<Reduction> {
    match name {
        "mean" => Ok(Reduction::Mean),
        "sum" => Ok(Reduction::Sum),
        _ => Err(PyValueError::new_err(format!("unknown reduction {name}"))),
    }
}

/// Pixel-wise softmax of layer-major logits (`classes` layers of `width * height`).
#[pyfunction]
fn softmax(logits: Vec<f64>, width: usize, height: usize, classes: usize) -> PyResult<Vec<f64>> {
    let y = LogitCube::new(width, height, classes, logits).map_err(err)?;
    Ok(softmax_pixelwise(&y).map_err(err)?.data().to_vec())
}

/// Loss value and logit gradient for probabilities against class ids.
#[pyfunction]
#[pyo3(signature = (probs, labels, width, height, classes, kind="ce", foreground_weight=1.0, reduction="sum"))]
#[allow(clippy::too_many_arguments)]
fn loss(
    probs: Vec<f64>,
    labels: Vec<u8>,
    width: usize,
    height: usize,
    classes: usize,
    kind: &str,
    foreground_weight: f64,
    reduction: &str,
) -> PyResult<(f64, Vec<f64>)> {
    let p = ProbabilityCube::new(width, height, classes, probs).map_err(err)?;
    let w = ClassWeights::foreground(classes, foreground_weight).map_err(err)?;
    let spec = match kind {
        "ce" => LossSpec::cross_entropy(w),
        "focal" => LossSpec::focal(w),
        _ => return Err(PyValueError::new_err(format!("unknown loss {kind}"))),
    }
    .with_reduction(self::reduction(reduction)?);
    let out = spec.evaluate_ids(&p, &labels).map_err(err)?;
    Ok((out.value, out.grad))
}

/// Mean of the per-class values.
#[pyfunction]
fn overall_miou(per_class: Vec<f64>) -> f64 {
    fidseg::metrics::overall_miou(&per_class)
}

/// Per-class IoU of a predicted id map against ground-truth ids.
#[pyfunction]
fn ious(pred: Vec<u8>, truth: Vec<u8>, width: usize, height: usize, classes: usize) -> PyResult<Vec<f64>> {
    let p = SegMap::new(width, height, classes, pred).map_err(err)?;
    let t = LabelMap::new(width, height, classes, truth).map_err(err)?;
    class_ious(&p, &t).map_err(err)
}

/// Centre `(class_id, x, y)` of each marker class; `None` for absent classes.
#[pyfunction]
fn centers(
    ids: Vec<u8>,
    width: usize,
    height: usize,
    classes: usize,
) -> PyResult<Vec<(u8, Option<(f64, f64)>)>> {
    let seg = SegMap::new(width, height, classes, ids).map_err(err)?;
    Ok(extract_centers(&seg)
        .into_iter()
        .map(|c| (c.class_id, c.center))
        .collect())
}

/// Writes a synthetic dataset and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, preset="desk", seed=0))]
fn generate(out_dir: PathBuf, preset: &str, seed: u64) -> PyResult<PathBuf> {
    let mut cfg = match preset {
        "desk" => ExperimentConfig::desk(),
        "paper" => ExperimentConfig::default(),
        _ => return Err(PyValueError::new_err(format!("unknown preset {preset}"))),
    };
    cfg.scene.seed = seed;
    write_dataset(&cfg.scene, &cfg.split, &out_dir).map_err(err)?;
    Ok(out_dir.join("manifest.json"))
}

/// A trained U-Net loaded from a checkpoint.
#[pyclass]
struct Model {
    inner: fidseg::unet::Model,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(&path).map_err(err)?.model,
        })
    }

    /// Builds a freshly initialized desk-scale model.
    #[staticmethod]
    #[pyo3(signature = (n_blocks=2, seed=0))]
    fn desk(n_blocks: usize, seed: u64) -> PyResult<Self> {
        let cfg = fidseg::unet::ModelConfig::desk(n_blocks);
        Ok(Self {
            inner: fidseg::unet::Model::build(&cfg, seed).map_err(err)?,
        })
    }

    #[getter]
    fn input_size(&self) -> (usize, usize) {
        let c = self.inner.config();
        (c.input_width, c.input_height)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    /// Probabilities (layer-major) and arg-max class ids for a [0, 1] image.
    fn predict(&self, image: Vec<f32>) -> PyResult<(Vec<f64>, Vec<u8>)> {
        let (w, h) = self.input_size();
        let img = NormalizedImage::new(w, h, image).map_err(err)?;
        let (p, seg) = self.inner.predict(&img).map_err(err)?;
        Ok((p.data().to_vec(), seg.ids().to_vec()))
    }
}

#[pymodule]
#[pyo3(name = "fidseg")]
fn fidseg_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_function(wrap_pyfunction!(overall_miou, m)?)?;
    m.add_function(wrap_pyfunction!(ious, m)?)?;
    m.add_function(wrap_pyfunction!(centers, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
