//! IoU/mIoU, marker-centre extraction and centre-error statistics.

pub mod centers;
pub mod components;
pub mod iou;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::types::{LabelMap, NormalizedImage, SegMap};
use crate::unet::{Real, UNet};

pub use centers::{
    center_errors, extract_centers, extract_centers_with, read_centers_csv, write_centers_csv,
    CenterEstimator, CenterOptions, CenterPair, CenterRecord, CenterSummary, ClassCenter,
    DEFAULT_PITCH_MM, DEFAULT_THRESHOLD_MM,
};
pub use components::{label_components, Component, Components, Connectivity};
pub use iou::{class_ious, iou, overall_miou, IoUReport};

/// Anything that turns an image into a segmentation.
pub trait Segmenter {
    fn segment(&self, id: &str, image: &NormalizedImage) -> Result<SegMap>;
}

impl<T: Real> Segmenter for UNet<T> {
    fn segment(&self, _id: &str, image: &NormalizedImage) -> Result<SegMap> {
        Ok(self.predict(image)?.1)
    }
}

/// Returns stored label maps by image id: the perfect model.
#[derive(Debug, Clone, Default)]
pub struct OracleSegmenter {
    pub labels: HashMap<String, LabelMap>,
}

impl Segmenter for OracleSegmenter {
    fn segment(&self, id: &str, _image: &NormalizedImage) -> Result<SegMap> {
        self.labels
            .get(id)
            .cloned()
            .map(SegMap::from)
            .ok_or_else(|| Error::InvalidInput(format!("oracle has no labels for {id}")))
    }
}

/// Per-image class IoUs over a test set, aggregated in sorted id order.
pub fn evaluate_dataset<S, I>(model: &S, test: I) -> Result<IoUReport>
where
    S: Segmenter + ?Sized,
    I: IntoIterator<Item = (String, crate::types::Sample)>,
{
    let mut rows = Vec::new();
    for (id, s) in test {
        let seg = model.segment(&id, &s.image)?;
        rows.push((id, class_ious(&seg, &s.labels)?));
    }
    if rows.is_empty() {
        return Err(Error::Contract("evaluation needs a non-empty test set".into()));
    }
    IoUReport::from_rows(rows)
}
