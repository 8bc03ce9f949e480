//! Dataset index: frames, splits, ground-truth centres and provenance.
//!
//! `manifest.json` holds a header and one entry per frame. Paths are relative
//! to the manifest's directory unless absolute.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io;
use crate::pipeline::{apply_transform, Flip};
use crate::synth::GtCenter;
use crate::types::{normalize_with, NormalizedImage, Normalization, Sample};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// How the stored image file encodes intensities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelEncoding {
    /// Raw detector counts; normalized on load.
    #[default]
    Raw,
    /// Already normalized, stored as 16-bit `round(v * 65535)`.
    Normalized16,
}

/// Where a derived frame came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub theta_deg: i32,
    pub flip: Flip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub label_path: PathBuf,
    pub setup_id: usize,
    pub view_angle_deg: f64,
    pub split: Split,
    pub gt_centers: Vec<GtCenter>,
    #[serde(default)]
    pub encoding: PixelEncoding,
    /// Derived frames only. With a raw encoding the transform is applied on
    /// load; with a normalized encoding the stored file already holds it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub pixel_pitch_mm: f64,
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub frames: Vec<FrameEntry>,
    /// Directory paths are resolved against; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: DatasetManifest = serde_json::from_slice(&bytes)?;
        if m.header.format_version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported manifest version {}",
                path.display(),
                m.header.format_version
            )));
        }
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    /// Writes `manifest.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Splits are by setup: no setup may appear in both, ids must be unique.
    pub fn validate(&self) -> Result<()> {
        let mut train = BTreeSet::new();
        let mut test = BTreeSet::new();
        let mut ids = BTreeSet::new();
        for f in &self.frames {
            if !ids.insert(f.id.as_str()) {
                return Err(Error::Contract(format!("duplicate frame id {}", f.id)));
            }
            match f.split {
                Split::Train => train.insert(f.setup_id),
                Split::Test => test.insert(f.setup_id),
            };
        }
        if let Some(s) = train.intersection(&test).next() {
            return Err(Error::Split(format!("setup {s} is in both train and test")));
        }
        Ok(())
    }

    pub fn frames_in(&self, split: Split) -> impl Iterator<Item = &FrameEntry> {
        self.frames.iter().filter(move |f| f.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.frames_in(split).count()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// SHA-256 of the serialized manifest (frames and header).
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Loads one frame as a normalized image plus labels, applying any
    /// on-the-fly transform.
    pub fn load_sample(&self, frame: &FrameEntry, norm: Normalization) -> Result<Sample> {
        let ipath = self.resolve(&frame.image_path);
        let lpath = self.resolve(&frame.label_path);
        let labels = io::read_labels(&lpath, self.header.num_classes)?;
        let image = match frame.encoding {
            PixelEncoding::Raw => normalize_with(&io::read_gray(&ipath)?, norm)?,
            PixelEncoding::Normalized16 => io::read_normalized16(&ipath)?,
        };
        if (image.width(), image.height()) != (labels.width(), labels.height()) {
            return Err(Error::Shape(format!(
                "{} and {} differ in size",
                ipath.display(),
                lpath.display()
            )));
        }
        match (&frame.provenance, frame.encoding) {
            (Some(p), PixelEncoding::Raw) => {
                let (image, labels) = apply_transform(&image, &labels, p.theta_deg, p.flip)?;
                Ok(Sample { image, labels })
            }
            _ => Ok(Sample { image, labels }),
        }
    }

    /// Loads every frame of a split, in manifest order.
    pub fn load_split(&self, split: Split, norm: Normalization) -> Result<Vec<(String, Sample)>> {
        self.frames_in(split)
            .map(|f| Ok((f.id.clone(), self.load_sample(f, norm)?)))
            .collect()
    }
}

/// Quantizes to the 16-bit grid used for stored normalized images.
pub fn quantize16(img: &NormalizedImage) -> NormalizedImage {
    let px = img
        .pixels()
        .iter()
        .map(|v| ((v * 65535.0).round() / 65535.0).clamp(0.0, 1.0))
        .collect();
    NormalizedImage::new(img.width(), img.height(), px).expect("values stay in [0, 1]")
}
