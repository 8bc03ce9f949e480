use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::transform::{transform_centers, Flip};
use crate::error::{Error, Result};
use crate::io;
use crate::manifest::{DatasetManifest, FrameEntry, PixelEncoding, Provenance, Split};
use crate::types::Normalization;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentScheme {
    #[default]
    None,
    /// Rotations -36..=35 degrees in 1 degree steps.
    SchemeA,
    /// Rotations -180..=165 in 15 degree steps, each unflipped and flipped
    /// both ways.
    SchemeB,
}

impl AugmentScheme {
    /// `(theta_deg, flip)` of every derived frame, in naming order.
    pub fn variants(self) -> Vec<(i32, Flip)> {
        match self {
            AugmentScheme::None => vec![(0, Flip::None)],
            AugmentScheme::SchemeA => (-36..=35).map(|t| (t, Flip::None)).collect(),
            AugmentScheme::SchemeB => (0..24)
                .flat_map(|k| {
                    let t = -180 + 15 * k;
                    [Flip::None, Flip::Horizontal, Flip::Vertical].map(|f| (t, f))
                })
                .collect(),
        }
    }

    pub fn multiplicity(self) -> usize {
        self.variants().len()
    }
}

/// `{source}_r{theta}_f{flip}`, e.g. `s03_a+015_r-36_fn`.
pub fn derived_id(source: &str, theta: i32, flip: Flip) -> String {
    format!("{source}_r{theta}_f{}", flip.code())
}

/// Expands training frames into their derived frames (transforms applied on
/// load). Test frames may not be augmented.
pub fn augment_frames(
    frames: &[FrameEntry],
    scheme: AugmentScheme,
    width: usize,
    height: usize,
) -> Result<Vec<FrameEntry>> {
    if let Some(f) = frames.iter().find(|f| f.split == Split::Test) {
        return Err(Error::Contract(format!("test frame {} cannot be augmented", f.id)));
    }
    if scheme == AugmentScheme::None {
        return Ok(frames.to_vec());
    }
    if let Some(f) = frames.iter().find(|f| f.provenance.is_some()) {
        return Err(Error::Contract(format!("frame {} is already derived", f.id)));
    }
    let mut out = Vec::with_capacity(frames.len() * scheme.multiplicity());
    for f in frames {
        for (theta, flip) in scheme.variants() {
            out.push(FrameEntry {
                id: derived_id(&f.id, theta, flip),
                gt_centers: transform_centers(&f.gt_centers, theta, flip, width, height),
                provenance: Some(Provenance {
                    source: f.id.clone(),
                    theta_deg: theta,
                    flip,
                }),
                ..f.clone()
            });
        }
    }
    Ok(out)
}

/// Augments the training split; test frames pass through untouched.
pub fn augment(manifest: &DatasetManifest, scheme: AugmentScheme) -> Result<DatasetManifest> {
    let train: Vec<FrameEntry> = manifest.frames_in(Split::Train).cloned().collect();
    let mut frames = augment_frames(&train, scheme, manifest.header.width, manifest.header.height)?;
    frames.extend(manifest.frames_in(Split::Test).cloned());
    let out = DatasetManifest {
        header: manifest.header.clone(),
        frames,
        root: manifest.root.clone(),
    };
    out.validate()?;
    Ok(out)
}

/// Writes every on-the-fly derived frame to `out_dir` as a stored normalized
/// image and rewrites the manifest to point at the files. Source frames keep
/// absolute paths into the original dataset.
pub fn materialize(
    manifest: &DatasetManifest,
    out_dir: &Path,
    norm: Normalization,
) -> Result<DatasetManifest> {
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for f in &manifest.frames {
        let derived = f.provenance.is_some() && f.encoding == PixelEncoding::Raw;
        if !derived {
            frames.push(FrameEntry {
                image_path: absolute(manifest.resolve(&f.image_path))?,
                label_path: absolute(manifest.resolve(&f.label_path))?,
                ..f.clone()
            });
            continue;
        }
        let s = manifest.load_sample(f, norm)?;
        let image_path = PathBuf::from(format!("images/{}.png", f.id));
        let label_path = PathBuf::from(format!("labels/{}.png", f.id));
        io::write_normalized16(&out_dir.join(&image_path), &s.image)?;
        io::write_labels(&out_dir.join(&label_path), &s.labels)?;
        frames.push(FrameEntry {
            image_path,
            label_path,
            encoding: PixelEncoding::Normalized16,
            ..f.clone()
        });
    }
    let out = DatasetManifest {
        header: manifest.header.clone(),
        frames,
        root: out_dir.to_path_buf(),
    };
    out.save(out_dir)?;
    Ok(out)
}

fn absolute(p: PathBuf) -> Result<PathBuf> {
    std::path::absolute(&p).map_err(|e| Error::io(&p, e))
}
