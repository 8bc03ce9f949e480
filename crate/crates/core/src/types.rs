//! Image, label and probability representations shared by every module.
//!
//! All grids are row-major: index `y * width + x`, with `(0, 0)` the centre of
//! the top-left pixel. Multi-layer cubes are stored layer-major, so layer `n`
//! occupies `data[n * width * height .. (n + 1) * width * height]`.
//!
//! Class ids follow the fixed marker sequencing: `0` background, then
//! `1` circle, `2` sphere, `3` tube, `4` cross, `5` triangle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of marker classes in the default configuration.
pub const DEFAULT_MARKER_CLASSES: usize = 5;
/// Background plus markers.
pub const DEFAULT_NUM_CLASSES: usize = DEFAULT_MARKER_CLASSES + 1;

fn check_dims(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidInput(format!(
            "image must be at least 1x1, got {width}x{height}"
        )));
    }
    if width * height != len {
        return Err(Error::Shape(format!(
            "{width}x{height} grid needs {} values, got {len}",
            width * height
        )));
    }
    Ok(())
}

/// Raw single-channel detector image (non-negative intensities).
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        check_dims(width, height, pixels.len())?;
        if let Some(v) = pixels.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "intensities must be finite and non-negative, found {v}"
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }
}

/// Network input: intensities after normalization, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl NormalizedImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        check_dims(width, height, pixels.len())?;
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "normalized pixel {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.pixels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Which normalization denominator to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// `(I - min) / max`. The output maximum is below 1 whenever `min > 0`.
    #[default]
    Paper,
    /// `(I - min) / (max - min)`.
    MinMax,
}

/// Normalizes with the default (`Paper`) formula.
pub fn normalize_image(img: &GrayImage) -> Result<NormalizedImage> {
    normalize_with(img, Normalization::Paper)
}

pub fn normalize_with(img: &GrayImage, mode: Normalization) -> Result<NormalizedImage> {
    let (lo, hi) = img
        .pixels
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if lo < 0.0 {
        return Err(Error::InvalidInput(format!("negative intensity {lo}")));
    }
    if hi <= 0.0 {
        return Err(Error::Degenerate("all-zero image has max = 0".into()));
    }
    let denom = match mode {
        Normalization::Paper => hi,
        Normalization::MinMax => hi - lo,
    };
    let pixels = if denom > 0.0 {
        img.pixels
            .iter()
            .map(|&v| ((v - lo) / denom).clamp(0.0, 1.0))
            .collect()
    } else {
        // constant image under min-max: nothing to stretch
        vec![0.0; img.pixels.len()]
    };
    NormalizedImage::new(img.width, img.height, pixels)
}

/// Compact ground truth: one class id per pixel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    width: usize,
    height: usize,
    num_classes: usize,
    ids: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, num_classes: usize, ids: Vec<u8>) -> Result<Self> {
        check_dims(width, height, ids.len())?;
        if num_classes < 2 || num_classes > 256 {
            return Err(Error::Config(format!(
                "num_classes must be in [2, 256], got {num_classes}"
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= num_classes) {
            return Err(Error::InvalidLabel(format!(
                "class id {bad} outside [0, {}]",
                num_classes - 1
            )));
        }
        Ok(Self {
            width,
            height,
            num_classes,
            ids,
        })
    }

    /// All-background map.
    pub fn background(width: usize, height: usize, num_classes: usize) -> Result<Self> {
        Self::new(width, height, num_classes, vec![0; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.ids[y * self.width + x]
    }

    /// Pixel count per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &id in &self.ids {
            counts[id as usize] += 1;
        }
        counts
    }

    /// Binary mask of one class.
    pub fn mask(&self, class: u8) -> Vec<bool> {
        self.ids.iter().map(|&id| id == class).collect()
    }
}

/// One-hot ground truth with `num_classes` binary layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelCube {
    width: usize,
    height: usize,
    num_classes: usize,
    layers: Vec<u8>,
}

impl LabelCube {
    /// Wraps raw layer-major data; the one-hot property is checked.
    pub fn from_layers(
        width: usize,
        height: usize,
        num_classes: usize,
        layers: Vec<u8>,
    ) -> Result<Self> {
        check_dims(width, height, layers.len() / num_classes.max(1))?;
        if layers.len() != width * height * num_classes {
            return Err(Error::Shape(format!(
                "cube {width}x{height}x{num_classes} needs {} values, got {}",
                width * height * num_classes,
                layers.len()
            )));
        }
        let cube = Self {
            width,
            height,
            num_classes,
            layers,
        };
        cube.validate()?;
        Ok(cube)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layer(&self, n: usize) -> &[u8] {
        let hw = self.width * self.height;
        &self.layers[n * hw..(n + 1) * hw]
    }

    pub fn layers(&self) -> &[u8] {
        &self.layers
    }

    /// Checks that every value is 0/1 and each pixel has exactly one 1.
    pub fn validate(&self) -> Result<()> {
        let hw = self.width * self.height;
        for p in 0..hw {
            let mut ones = 0;
            for n in 0..self.num_classes {
                match self.layers[n * hw + p] {
                    0 => {}
                    1 => ones += 1,
                    v => {
                        return Err(Error::InvalidCube(format!(
                            "value {v} at pixel {p}, layer {n}"
                        )))
                    }
                }
            }
            if ones != 1 {
                return Err(Error::InvalidCube(format!(
                    "pixel ({}, {}) has {ones} active layers",
                    p % self.width,
                    p / self.width
                )));
            }
        }
        Ok(())
    }
}

pub fn encode_onehot(map: &LabelMap) -> LabelCube {
    let hw = map.width * map.height;
    let mut layers = vec![0u8; hw * map.num_classes];
    for (p, &id) in map.ids.iter().enumerate() {
        layers[id as usize * hw + p] = 1;
    }
    LabelCube {
        width: map.width,
        height: map.height,
        num_classes: map.num_classes,
        layers,
    }
}

pub fn decode_labelmap(cube: &LabelCube) -> Result<LabelMap> {
    cube.validate()?;
    let hw = cube.width * cube.height;
    let ids = (0..hw)
        .map(|p| {
            (0..cube.num_classes)
                .find(|&n| cube.layers[n * hw + p] == 1)
                .expect("validated one-hot") as u8
        })
        .collect();
    LabelMap::new(cube.width, cube.height, cube.num_classes, ids)
}

/// Unnormalized per-pixel class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitCube {
    width: usize,
    height: usize,
    num_classes: usize,
    data: Vec<f64>,
}

impl LogitCube {
    pub fn new(width: usize, height: usize, num_classes: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || num_classes == 0 {
            return Err(Error::Shape("empty logit cube".into()));
        }
        if data.len() != width * height * num_classes {
            return Err(Error::Shape(format!(
                "logit cube {width}x{height}x{num_classes} needs {} values, got {}",
                width * height * num_classes,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            num_classes,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn layer(&self, n: usize) -> &[f64] {
        let hw = self.width * self.height;
        &self.data[n * hw..(n + 1) * hw]
    }
}

/// Per-pixel class distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityCube {
    width: usize,
    height: usize,
    num_classes: usize,
    data: Vec<f64>,
}

impl ProbabilityCube {
    /// Wraps layer-major probabilities, checking the simplex property to `1e-5`.
    pub fn new(width: usize, height: usize, num_classes: usize, data: Vec<f64>) -> Result<Self> {
        let cube = Self::new_unchecked(width, height, num_classes, data)?;
        cube.validate(1e-5)?;
        Ok(cube)
    }

    pub(crate) fn new_unchecked(
        width: usize,
        height: usize,
        num_classes: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if width == 0 || height == 0 || num_classes == 0 {
            return Err(Error::Shape("empty probability cube".into()));
        }
        if data.len() != width * height * num_classes {
            return Err(Error::Shape(format!(
                "probability cube {width}x{height}x{num_classes} needs {} values, got {}",
                width * height * num_classes,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            num_classes,
            data,
        })
    }

    /// Every value in `[0, 1]` and per-pixel sums equal to 1 within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let hw = self.width * self.height;
        for p in 0..hw {
            let mut sum = 0.0;
            for n in 0..self.num_classes {
                let v = self.data[n * hw + p];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidInput(format!(
                        "probability {v} outside [0, 1] at pixel {p}"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > tol {
                return Err(Error::InvalidInput(format!(
                    "probabilities at pixel {p} sum to {sum}"
                )));
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn layer(&self, n: usize) -> &[f64] {
        let hw = self.width * self.height;
        &self.data[n * hw..(n + 1) * hw]
    }

    /// Probability of class `n` at pixel index `p`.
    pub fn at(&self, p: usize, n: usize) -> f64 {
        self.data[n * self.width * self.height + p]
    }

    /// Per-pixel argmax; ties go to the smaller class id.
    pub fn argmax(&self) -> SegMap {
        let hw = self.width * self.height;
        let ids = (0..hw)
            .map(|p| {
                let mut best = 0;
                let mut best_v = self.data[p];
                for n in 1..self.num_classes {
                    let v = self.data[n * hw + p];
                    if v > best_v {
                        best = n;
                        best_v = v;
                    }
                }
                best as u8
            })
            .collect();
        SegMap {
            width: self.width,
            height: self.height,
            num_classes: self.num_classes,
            ids,
        }
    }
}

/// Predicted partition of the image into class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMap {
    width: usize,
    height: usize,
    num_classes: usize,
    ids: Vec<u8>,
}

impl SegMap {
    pub fn new(width: usize, height: usize, num_classes: usize, ids: Vec<u8>) -> Result<Self> {
        let map = LabelMap::new(width, height, num_classes, ids)?;
        Ok(Self::from(map))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.ids[y * self.width + x]
    }

    pub fn mask(&self, class: u8) -> Vec<bool> {
        self.ids.iter().map(|&id| id == class).collect()
    }
}

impl From<LabelMap> for SegMap {
    fn from(m: LabelMap) -> Self {
        Self {
            width: m.width,
            height: m.height,
            num_classes: m.num_classes,
            ids: m.ids,
        }
    }
}

impl From<SegMap> for LabelMap {
    fn from(s: SegMap) -> Self {
        Self {
            width: s.width,
            height: s.height,
            num_classes: s.num_classes,
            ids: s.ids,
        }
    }
}

/// A training/evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: NormalizedImage,
    pub labels: LabelMap,
}
