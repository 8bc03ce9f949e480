//! Seeded synthetic fluoroscopy frames with exact ground truth.
//!
//! Each setup is a stent segment (a cylinder) carrying one marker of every
//! class. A view angle rotates the segment about its axis; markers are
//! projected orthographically and foreshortened by how obliquely they face
//! the detector. Marker footprints are magnified per class so the labeled
//! pixel fractions hit [`SceneConfig::class_fractions`].

mod dataset;
pub mod marker;
mod scene;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use dataset::{generate_dataset, write_dataset, SplitRule};
pub use marker::{render_marker, MarkerPose, MarkerShape, MarkerSpec, Stamp};
pub use scene::{compose_frame, frame_id, FrameRecord, GtCenter};

/// Per-class labeled-pixel fractions of the frame area (classes 1..=5).
pub const DEFAULT_CLASS_FRACTIONS: [f64; 5] = [0.0003, 0.0001, 0.0002, 0.0003, 0.0003];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Additive Gaussian noise (detector counts).
    pub gaussian_sigma: f64,
    /// Signal-dependent noise: variance = `poisson_scale * intensity`.
    pub poisson_scale: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            gaussian_sigma: 40.0,
            poisson_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackgroundConfig {
    /// Mean detector level (counts).
    pub level: f64,
    /// Relative amplitude of the low-frequency gradient.
    pub gradient_amplitude: f64,
    /// Relative attenuation of the stent wires.
    pub wire_amplitude: f64,
    /// Wire half-width (px).
    pub wire_width_px: f64,
    /// Relative amplitude of the sinusoidal mesh texture.
    pub mesh_amplitude: f64,
    /// Mesh period (px).
    pub mesh_period_px: f64,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        Self {
            level: 3000.0,
            gradient_amplitude: 0.25,
            wire_amplitude: 0.3,
            wire_width_px: 1.2,
            mesh_amplitude: 0.05,
            mesh_period_px: 24.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub n_setups: usize,
    pub view_angles: Vec<f64>,
    pub pixel_pitch_mm: f64,
    pub markers: Vec<MarkerSpec>,
    pub class_fractions: Vec<f64>,
    /// Marker segments per frame; each carries one marker of every class.
    pub stent_segments: usize,
    /// Foreshortening of a marker seen edge-on.
    pub min_foreshortening: f64,
    pub min_marker_distance_px: f64,
    /// Lets markers overlap (stress tests); later markers overwrite earlier ones.
    pub allow_overlap: bool,
    /// Fractional attenuation of marker pixels; 1 renders them at zero.
    pub contrast: f64,
    pub noise: NoiseConfig,
    pub background: BackgroundConfig,
    /// Whole training setups abandoned (the marker fell off).
    pub dropped_setups: usize,
    /// Individual training frames missing on top of that.
    pub dropped_frames: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 512,
            height: 512,
            n_setups: 14,
            view_angles: (0..13).map(|k| -90.0 + 15.0 * k as f64).collect(),
            pixel_pitch_mm: 0.8,
            markers: MarkerSpec::defaults(),
            class_fractions: DEFAULT_CLASS_FRACTIONS.to_vec(),
            stent_segments: 1,
            min_foreshortening: 0.3,
            min_marker_distance_px: 20.0,
            allow_overlap: false,
            contrast: 0.6,
            noise: NoiseConfig::default(),
            background: BackgroundConfig::default(),
            dropped_setups: 1,
            dropped_frames: 11,
            seed: 0,
        }
    }
}

impl SceneConfig {
    /// The 128x128 desk benchmark: 25 setups x 10 angles, no dropouts.
    pub fn desk() -> Self {
        let d = Self::default();
        Self {
            width: 128,
            height: 128,
            n_setups: 25,
            view_angles: (0..10).map(|k| -90.0 + 20.0 * k as f64).collect(),
            class_fractions: d.class_fractions.iter().map(|f| 4.0 * f).collect(),
            min_marker_distance_px: 12.0,
            background: BackgroundConfig {
                wire_width_px: 0.7,
                mesh_period_px: 8.0,
                ..d.background
            },
            dropped_setups: 0,
            dropped_frames: 0,
            ..d
        }
    }

    pub fn num_classes(&self) -> usize {
        self.markers.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::Config("frames must be at least 16x16".into()));
        }
        if self.n_setups == 0 || self.view_angles.is_empty() {
            return Err(Error::Config("need at least one setup and one view angle".into()));
        }
        if let Some(a) = self.view_angles.iter().find(|a| !(a.abs() <= 90.0)) {
            return Err(Error::Config(format!("view angle {a} outside [-90, 90]")));
        }
        if !(self.pixel_pitch_mm > 0.0) {
            return Err(Error::Config("pixel pitch must be > 0".into()));
        }
        if self.markers.is_empty() || self.markers.len() != self.class_fractions.len() {
            return Err(Error::Config(format!(
                "{} markers but {} class fractions",
                self.markers.len(),
                self.class_fractions.len()
            )));
        }
        for (k, m) in self.markers.iter().enumerate() {
            if m.class_id as usize != k + 1 {
                return Err(Error::Config(format!(
                    "marker {k} has class id {}, expected {}",
                    m.class_id,
                    k + 1
                )));
            }
        }
        if self.stent_segments == 0 {
            return Err(Error::Config("stent_segments must be >= 1".into()));
        }
        if !(self.min_foreshortening > 0.0 && self.min_foreshortening <= 1.0) {
            return Err(Error::Config("min_foreshortening must be in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.contrast) {
            return Err(Error::Config("contrast must be in [0, 1]".into()));
        }
        if self.noise.gaussian_sigma < 0.0 || self.noise.poisson_scale < 0.0 {
            return Err(Error::Config("noise amplitudes must be >= 0".into()));
        }
        let b = &self.background;
        if !(b.level > 0.0)
            || !(0.0..1.0).contains(&b.gradient_amplitude)
            || !(0.0..1.0).contains(&b.wire_amplitude)
            || !(0.0..1.0).contains(&b.mesh_amplitude)
            || b.gradient_amplitude + b.mesh_amplitude >= 1.0
        {
            return Err(Error::Config(
                "background needs level > 0 and relative amplitudes in [0, 1)".into(),
            ));
        }
        let mags = self.magnifications()?;
        if !self.allow_overlap {
            let mut ext = self
                .markers
                .iter()
                .zip(&mags)
                .map(|(m, g)| m.extent_mm().map(|e| e * g / self.pixel_pitch_mm))
                .collect::<Result<Vec<_>>>()?;
            ext.sort_by(|a, b| b.total_cmp(a));
            let need = ext[0] + ext.get(1).copied().unwrap_or(0.0) + 1.0;
            if self.min_marker_distance_px < need {
                return Err(Error::Config(format!(
                    "min_marker_distance_px {} cannot keep markers apart (needs {need:.1})",
                    self.min_marker_distance_px
                )));
            }
        }
        Ok(())
    }

    /// Mean foreshortening over a uniformly distributed facing direction.
    pub fn mean_foreshortening(&self) -> f64 {
        let f = self.min_foreshortening;
        f + (1.0 - f) * 2.0 / std::f64::consts::PI
    }

    /// Expected labeled pixels per marker of each class.
    pub fn target_pixels(&self) -> Vec<f64> {
        let area = (self.width * self.height) as f64;
        self.class_fractions
            .iter()
            .map(|f| f * area / self.stent_segments as f64)
            .collect()
    }

    /// Per-class magnification that turns the physical footprint into the
    /// target pixel count on average.
    pub fn magnifications(&self) -> Result<Vec<f64>> {
        let mean_f = self.mean_foreshortening();
        let px_area = self.pixel_pitch_mm * self.pixel_pitch_mm;
        let max_extent = self.width.min(self.height) as f64 / 8.0;
        self.markers
            .iter()
            .zip(self.target_pixels())
            .map(|(m, target)| {
                let native = m.footprint_area_mm2()? / px_area;
                if !(target >= 2.0) {
                    return Err(Error::Config(format!(
                        "class {} targets {target:.2} px per marker, too few to render",
                        m.class_id
                    )));
                }
                let mag = (target / (native * mean_f)).sqrt();
                let extent = m.extent_mm()? * mag / self.pixel_pitch_mm;
                if extent > max_extent {
                    return Err(Error::Config(format!(
                        "class {} needs a {extent:.1} px marker radius for its fraction target",
                        m.class_id
                    )));
                }
                Ok(mag)
            })
            .collect()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("scene config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Derives an independent seed from a parent seed and integer tags.
pub(crate) fn sub_seed(seed: u64, tags: &[i64]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for t in tags {
        h.update(t.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}
