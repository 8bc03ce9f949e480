use std::path::Path;

use serde::{Deserialize, Serialize};

use super::components::{label_components, Connectivity};
use super::iou::csv_err;
use crate::error::{Error, Result};
use crate::types::SegMap;

/// Default detector pitch (mm per pixel).
pub const DEFAULT_PITCH_MM: f64 = 0.8;
/// Centre errors strictly below this count as detected.
pub const DEFAULT_THRESHOLD_MM: f64 = 1.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterEstimator {
    /// Centroid of the largest connected component.
    #[default]
    LargestComponent,
    /// Centroid of every pixel of the class.
    AllPixels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CenterOptions {
    pub estimator: CenterEstimator,
    pub connectivity: Connectivity,
}

/// Centre of one marker class, `None` when the class is absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassCenter {
    pub class_id: u8,
    pub center: Option<(f64, f64)>,
}

/// Marker centres with the default estimator (largest 4-connected component).
pub fn extract_centers(seg: &SegMap) -> Vec<ClassCenter> {
    extract_centers_with(seg, CenterOptions::default())
}

pub fn extract_centers_with(seg: &SegMap, opts: CenterOptions) -> Vec<ClassCenter> {
    let (w, h) = (seg.width(), seg.height());
    (1..seg.num_classes() as u8)
        .map(|class_id| {
            let mask = seg.mask(class_id);
            let center = match opts.estimator {
                CenterEstimator::LargestComponent => {
                    let comps = label_components(&mask, w, h, opts.connectivity);
                    comps.largest().map(|i| comps.components[i].centroid)
                }
                CenterEstimator::AllPixels => {
                    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
                    for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        sx += (p % w) as f64;
                        sy += (p / w) as f64;
                        n += 1;
                    }
                    (n > 0).then(|| (sx / n as f64, sy / n as f64))
                }
            };
            ClassCenter { class_id, center }
        })
        .collect()
}

/// A prediction paired with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterPair {
    pub image_id: String,
    pub class_id: u8,
    pub predicted: Option<(f64, f64)>,
    pub ground_truth: (f64, f64),
}

/// One row of the centres table. Missing predictions have no error and are
/// never detected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterRecord {
    pub image_id: String,
    pub class_id: u8,
    pub pred_x_px: Option<f64>,
    pub pred_y_px: Option<f64>,
    pub gt_x_px: f64,
    pub gt_y_px: f64,
    pub error_px: Option<f64>,
    pub error_mm: Option<f64>,
    pub detected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterSummary {
    pub records: Vec<CenterRecord>,
    /// Fraction of all expected markers detected, missing ones counted as failures.
    pub detection_rate: f64,
    pub missing: usize,
}

pub fn center_errors(
    pairs: &[CenterPair],
    pitch_mm_per_px: f64,
    threshold_mm: f64,
) -> Result<CenterSummary> {
    if !(pitch_mm_per_px > 0.0) {
        return Err(Error::Config(format!(
            "pixel pitch must be > 0, got {pitch_mm_per_px}"
        )));
    }
    let records: Vec<CenterRecord> = pairs
        .iter()
        .map(|p| {
            let (gx, gy) = p.ground_truth;
            let error_px = p
                .predicted
                .map(|(x, y)| ((x - gx).powi(2) + (y - gy).powi(2)).sqrt());
            let error_mm = error_px.map(|e| e * pitch_mm_per_px);
            CenterRecord {
                image_id: p.image_id.clone(),
                class_id: p.class_id,
                pred_x_px: p.predicted.map(|c| c.0),
                pred_y_px: p.predicted.map(|c| c.1),
                gt_x_px: gx,
                gt_y_px: gy,
                error_px,
                error_mm,
                detected: error_mm.is_some_and(|e| e < threshold_mm),
            }
        })
        .collect();
    let detected = records.iter().filter(|r| r.detected).count();
    let missing = records.iter().filter(|r| r.error_px.is_none()).count();
    let detection_rate = if records.is_empty() {
        0.0
    } else {
        detected as f64 / records.len() as f64
    };
    Ok(CenterSummary {
        records,
        detection_rate,
        missing,
    })
}

pub fn write_centers_csv(path: &Path, records: &[CenterRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_centers_csv(path: &Path) -> Result<Vec<CenterRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .map(|rec| rec.map_err(|e| csv_err(path, e)))
        .collect()
}
