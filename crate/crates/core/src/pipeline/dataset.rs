use std::borrow::Cow;
use std::collections::HashMap;
use std::path::PathBuf;

use super::enhance::{enhance, EnhanceConfig};
use super::transform::{apply_transform, Flip};
use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, FrameEntry, PixelEncoding, Split};
use crate::types::{Normalization, Sample};

/// Indexed access to training samples.
pub trait TrainSet {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<Cow<'_, Sample>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn out_of_range(i: usize, n: usize) -> Error {
    Error::InvalidInput(format!("sample {i} out of range (len {n})"))
}

/// Samples held in memory as given.
#[derive(Debug, Clone, Default)]
pub struct InMemorySet {
    pub samples: Vec<Sample>,
}

impl InMemorySet {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    /// Applies enhancement to every sample up front.
    pub fn enhanced(self, cfg: &EnhanceConfig) -> Result<Self> {
        let samples = self
            .samples
            .into_iter()
            .map(|s| {
                Ok(Sample {
                    image: enhance(&s.image, cfg)?,
                    labels: s.labels,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { samples })
    }
}

impl TrainSet for InMemorySet {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn get(&self, i: usize) -> Result<Cow<'_, Sample>> {
        self.samples
            .get(i)
            .map(Cow::Borrowed)
            .ok_or_else(|| out_of_range(i, self.samples.len()))
    }
}

/// Source samples expanded by a list of transforms, computed on access.
/// Index `i` is variant `i % variants.len()` of source `i / variants.len()`.
#[derive(Debug, Clone)]
pub struct AugmentedSet {
    pub base: Vec<Sample>,
    pub variants: Vec<(i32, Flip)>,
    pub enhance: Option<EnhanceConfig>,
}

impl TrainSet for AugmentedSet {
    fn len(&self) -> usize {
        self.base.len() * self.variants.len()
    }

    fn get(&self, i: usize) -> Result<Cow<'_, Sample>> {
        if i >= self.len() {
            return Err(out_of_range(i, self.len()));
        }
        let s = &self.base[i / self.variants.len()];
        let (theta, flip) = self.variants[i % self.variants.len()];
        let (mut image, labels) = apply_transform(&s.image, &s.labels, theta, flip)?;
        if let Some(cfg) = &self.enhance {
            image = enhance(&image, cfg)?;
        }
        Ok(Cow::Owned(Sample { image, labels }))
    }
}

/// One split of a manifest. Raw-encoded files are decoded once and cached;
/// derived frames are transformed on access.
#[derive(Debug)]
pub struct ManifestSet {
    manifest: DatasetManifest,
    frames: Vec<FrameEntry>,
    norm: Normalization,
    enhance: Option<EnhanceConfig>,
    sources: HashMap<PathBuf, Sample>,
}

impl ManifestSet {
    pub fn new(
        manifest: &DatasetManifest,
        split: Split,
        norm: Normalization,
        enhance: Option<EnhanceConfig>,
    ) -> Result<Self> {
        let frames: Vec<FrameEntry> = manifest.frames_in(split).cloned().collect();
        let mut sources = HashMap::new();
        for f in frames.iter().filter(|f| f.encoding == PixelEncoding::Raw) {
            if !sources.contains_key(&f.image_path) {
                let plain = FrameEntry {
                    provenance: None,
                    ..f.clone()
                };
                sources.insert(f.image_path.clone(), manifest.load_sample(&plain, norm)?);
            }
        }
        Ok(Self {
            manifest: manifest.clone(),
            frames,
            norm,
            enhance,
            sources,
        })
    }

    pub fn frames(&self) -> &[FrameEntry] {
        &self.frames
    }
}

impl TrainSet for ManifestSet {
    fn len(&self) -> usize {
        self.frames.len()
    }

    fn get(&self, i: usize) -> Result<Cow<'_, Sample>> {
        let f = self.frames.get(i).ok_or_else(|| out_of_range(i, self.frames.len()))?;
        let sample = match (f.encoding, &f.provenance) {
            (PixelEncoding::Raw, None) => Cow::Borrowed(&self.sources[&f.image_path]),
            (PixelEncoding::Raw, Some(p)) => {
                let s = &self.sources[&f.image_path];
                let (image, labels) = apply_transform(&s.image, &s.labels, p.theta_deg, p.flip)?;
                Cow::Owned(Sample { image, labels })
            }
            (PixelEncoding::Normalized16, _) => Cow::Owned(self.manifest.load_sample(f, self.norm)?),
        };
        match &self.enhance {
            None => Ok(sample),
            Some(cfg) => Ok(Cow::Owned(Sample {
                image: enhance(&sample.image, cfg)?,
                labels: sample.labels.clone(),
            })),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{augment, AugmentScheme};
    use crate::synth::{write_dataset, SceneConfig, SplitRule};

    #[test]
    fn manifest_set_matches_augmented_set() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig {
            n_setups: 3,
            view_angles: vec![-10.0, 30.0],
            ..SceneConfig::desk()
        };
        let m = write_dataset(&cfg, &SplitRule::Count { test_setups: 1 }, dir.path()).unwrap();
        let aug = augment(&m, AugmentScheme::SchemeA).unwrap();
        let ms = ManifestSet::new(&aug, Split::Train, Normalization::Paper, None).unwrap();
        assert_eq!(ms.len(), 4 * 72);
        let base: Vec<Sample> = m
            .load_split(Split::Train, Normalization::Paper)
            .unwrap()
            .into_iter()
            .map(|(_, s)| s)
            .collect();
        let av = AugmentedSet {
            base,
            variants: AugmentScheme::SchemeA.variants(),
            enhance: None,
        };
        assert_eq!(av.len(), ms.len());
        for i in [0, 5, 71, 72, 200, 287] {
            assert_eq!(av.get(i).unwrap(), ms.get(i).unwrap());
        }
        assert!(ms.get(288).is_err());
    }
}
