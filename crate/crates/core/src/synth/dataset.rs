use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{compose_frame, frame_id, FrameRecord};
use super::{sub_seed, SceneConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::manifest::{
    DatasetManifest, FrameEntry, ManifestHeader, PixelEncoding, Split, MANIFEST_VERSION,
};

/// How setups are assigned to splits. Frames of one setup always share a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    /// A seeded choice of `test_setups` complete setups for testing.
    Count { test_setups: usize },
    Explicit { train: Vec<usize>, test: Vec<usize> },
}

impl Default for SplitRule {
    fn default() -> Self {
        SplitRule::Count { test_setups: 6 }
    }
}

struct Plan {
    setup_id: usize,
    angle: f64,
    split: Split,
}

fn plan(cfg: &SceneConfig, rule: &SplitRule) -> Result<Vec<Plan>> {
    cfg.validate()?;
    let n = cfg.n_setups;
    let (train, test): (Vec<usize>, BTreeSet<usize>) = match rule {
        SplitRule::Count { test_setups } => {
            if *test_setups > n {
                return Err(Error::Split(format!(
                    "{test_setups} test setups requested out of {n}"
                )));
            }
            let mut ids: Vec<usize> = (0..n).collect();
            ids.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &[-1])));
            let test: BTreeSet<usize> = ids[..*test_setups].iter().copied().collect();
            ((0..n).filter(|s| !test.contains(s)).collect(), test)
        }
        SplitRule::Explicit { train, test } => {
            let tr: BTreeSet<usize> = train.iter().copied().collect();
            let te: BTreeSet<usize> = test.iter().copied().collect();
            if let Some(s) = tr.intersection(&te).next() {
                return Err(Error::Split(format!("setup {s} assigned to both splits")));
            }
            if let Some(s) = tr.union(&te).find(|&&s| s >= n) {
                return Err(Error::Split(format!("setup {s} does not exist (n_setups = {n})")));
            }
            (tr.into_iter().collect(), te)
        }
    };
    if cfg.dropped_setups > train.len() {
        return Err(Error::Config(format!(
            "cannot drop {} of {} training setups",
            cfg.dropped_setups,
            train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &[-2]));
    let mut kept = train.clone();
    kept.shuffle(&mut rng);
    kept.truncate(train.len() - cfg.dropped_setups);
    kept.sort_unstable();
    let mut train_frames: Vec<(usize, f64)> = kept
        .iter()
        .flat_map(|&s| cfg.view_angles.iter().map(move |&a| (s, a)))
        .collect();
    if cfg.dropped_frames > train_frames.len() {
        return Err(Error::Config(format!(
            "cannot drop {} of {} training frames",
            cfg.dropped_frames,
            train_frames.len()
        )));
    }
    let mut drop_idx: Vec<usize> = (0..train_frames.len()).collect();
    drop_idx.shuffle(&mut rng);
    let dropped: BTreeSet<usize> = drop_idx[..cfg.dropped_frames].iter().copied().collect();
    train_frames = train_frames
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !dropped.contains(i))
        .map(|(_, f)| f)
        .collect();

    let mut out: Vec<Plan> = train_frames
        .into_iter()
        .map(|(setup_id, angle)| Plan {
            setup_id,
            angle,
            split: Split::Train,
        })
        .collect();
    for &s in &test {
        for &a in &cfg.view_angles {
            out.push(Plan {
                setup_id: s,
                angle: a,
                split: Split::Test,
            });
        }
    }
    out.sort_by(|a, b| (a.setup_id, a.angle).partial_cmp(&(b.setup_id, b.angle)).unwrap());
    Ok(out)
}

fn header(cfg: &SceneConfig) -> ManifestHeader {
    ManifestHeader {
        format_version: MANIFEST_VERSION,
        seed: cfg.seed,
        config_hash: cfg.config_hash(),
        pixel_pitch_mm: cfg.pixel_pitch_mm,
        width: cfg.width,
        height: cfg.height,
        num_classes: cfg.num_classes(),
    }
}

fn entry(fr: &FrameRecord, split: Split) -> FrameEntry {
    FrameEntry {
        id: fr.id.clone(),
        image_path: PathBuf::from(format!("images/{}.png", fr.id)),
        label_path: PathBuf::from(format!("labels/{}.png", fr.id)),
        setup_id: fr.setup_id,
        view_angle_deg: fr.view_angle_deg,
        split,
        gt_centers: fr.gt_centers.clone(),
        encoding: PixelEncoding::Raw,
        provenance: None,
    }
}

/// Renders every frame in memory. The manifest's paths are where
/// [`write_dataset`] would put the files.
pub fn generate_dataset(
    cfg: &SceneConfig,
    rule: &SplitRule,
) -> Result<(DatasetManifest, Vec<FrameRecord>)> {
    let plan = plan(cfg, rule)?;
    let mut frames = Vec::with_capacity(plan.len());
    let mut entries = Vec::with_capacity(plan.len());
    for p in &plan {
        let fr = compose_frame(cfg, p.setup_id, p.angle)?;
        entries.push(entry(&fr, p.split));
        frames.push(fr);
    }
    let manifest = DatasetManifest {
        header: header(cfg),
        frames: entries,
        root: PathBuf::new(),
    };
    manifest.validate()?;
    Ok((manifest, frames))
}

/// Renders frames straight to `out_dir/{images,labels}` and writes the manifest.
pub fn write_dataset(cfg: &SceneConfig, rule: &SplitRule, out_dir: &Path) -> Result<DatasetManifest> {
    let plan = plan(cfg, rule)?;
    let mut entries = Vec::with_capacity(plan.len());
    for p in &plan {
        let fr = compose_frame(cfg, p.setup_id, p.angle)?;
        let e = entry(&fr, p.split);
        io::write_gray16(&out_dir.join(&e.image_path), &fr.image)?;
        io::write_labels(&out_dir.join(&e.label_path), &fr.labels)?;
        debug_assert_eq!(e.id, frame_id(p.setup_id, p.angle));
        entries.push(e);
    }
    let manifest = DatasetManifest {
        header: header(cfg),
        frames: entries,
        root: out_dir.to_path_buf(),
    };
    manifest.validate()?;
    manifest.save(out_dir)?;
    Ok(manifest)
}
