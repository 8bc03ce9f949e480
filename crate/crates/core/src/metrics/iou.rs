use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{LabelMap, SegMap};

/// `|pred ∩ gt| / |pred ∪ gt|`. Two empty masks agree perfectly (1.0).
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "mask sizes differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// IoU of every class (background included) for one image.
pub fn class_ious(pred: &SegMap, gt: &LabelMap) -> Result<Vec<f64>> {
    if (pred.width(), pred.height(), pred.num_classes())
        != (gt.width(), gt.height(), gt.num_classes())
    {
        return Err(Error::Shape(format!(
            "prediction {}x{}x{} vs ground truth {}x{}x{}",
            pred.width(),
            pred.height(),
            pred.num_classes(),
            gt.width(),
            gt.height(),
            gt.num_classes()
        )));
    }
    let nc = gt.num_classes();
    let mut inter = vec![0usize; nc];
    let mut union = vec![0usize; nc];
    for (&p, &g) in pred.ids().iter().zip(gt.ids()) {
        if p == g {
            inter[p as usize] += 1;
            union[p as usize] += 1;
        } else {
            union[p as usize] += 1;
            union[g as usize] += 1;
        }
    }
    Ok((0..nc)
        .map(|n| {
            if union[n] == 0 {
                1.0
            } else {
                inter[n] as f64 / union[n] as f64
            }
        })
        .collect())
}

/// Arithmetic mean of the per-class values.
pub fn overall_miou(per_class: &[f64]) -> f64 {
    per_class.iter().sum::<f64>() / per_class.len() as f64
}

/// Per-image, per-class IoU with its class means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    pub image_ids: Vec<String>,
    /// `[image][class]`
    pub per_image: Vec<Vec<f64>>,
    pub per_class_miou: Vec<f64>,
    /// Per-class standard deviation over images (population form).
    pub per_class_std: Vec<f64>,
    pub overall_miou: f64,
}

#[derive(Serialize)]
struct Summary<'a> {
    images: usize,
    per_class_miou: &'a [f64],
    per_class_std: &'a [f64],
    overall_miou: f64,
}

impl IoUReport {
    /// Aggregates rows sorted by image id.
    pub fn from_rows(mut rows: Vec<(String, Vec<f64>)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Contract("IoU report needs at least one image".into()));
        }
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        let nc = rows[0].1.len();
        if rows.iter().any(|r| r.1.len() != nc) {
            return Err(Error::Shape("rows with differing class counts".into()));
        }
        let n = rows.len() as f64;
        let per_class_miou: Vec<f64> = (0..nc)
            .map(|c| rows.iter().map(|r| r.1[c]).sum::<f64>() / n)
            .collect();
        let per_class_std = (0..nc)
            .map(|c| {
                let m = per_class_miou[c];
                (rows.iter().map(|r| (r.1[c] - m).powi(2)).sum::<f64>() / n).sqrt()
            })
            .collect();
        let overall = overall_miou(&per_class_miou);
        let (image_ids, per_image) = rows.into_iter().unzip();
        Ok(Self {
            image_ids,
            per_image,
            per_class_miou,
            per_class_std,
            overall_miou: overall,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.per_class_miou.len()
    }

    /// Mean of the marker classes (everything but background).
    pub fn foreground_miou(&self) -> f64 {
        overall_miou(&self.per_class_miou[1..])
    }

    /// Rows = images, columns = classes.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut header = vec!["image_id".to_string()];
        header.extend((0..self.num_classes()).map(|c| format!("class_{c}")));
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for (id, row) in self.image_ids.iter().zip(&self.per_image) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| format!("{v}")));
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let id = rec.get(0).unwrap_or_default().to_string();
            let vals = rec
                .iter()
                .skip(1)
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push((id, vals));
        }
        Self::from_rows(rows)
    }

    pub fn write_summary_json(&self, path: &Path) -> Result<()> {
        let s = Summary {
            images: self.image_ids.len(),
            per_class_miou: &self.per_class_miou,
            per_class_std: &self.per_class_std,
            overall_miou: self.overall_miou,
        };
        std::fs::write(path, serde_json::to_vec_pretty(&s)?).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidInput(format!("{}: {other:?}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(w: usize, x0: usize, y0: usize, s: usize) -> Vec<bool> {
        let mut m = vec![false; w * w];
        for y in y0..y0 + s {
            for x in x0..x0 + s {
                m[y * w + x] = true;
            }
        }
        m
    }

    #[test]
    fn basic_cases() {
        let a = square(6, 1, 1, 2);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &square(6, 4, 4, 2)).unwrap(), 0.0);
        assert_eq!(iou(&[false; 4], &[false; 4]).unwrap(), 1.0);
        assert_eq!(iou(&a, &vec![false; 36]).unwrap(), 0.0);
        assert!(iou(&a, &[true]).is_err());
    }

    #[test]
    fn shifted_square_brute_force() {
        let pred = square(6, 1, 1, 2);
        let gt = square(6, 2, 1, 2);
        // brute-force count
        let i = pred.iter().zip(&gt).filter(|(p, g)| **p && **g).count();
        let u = pred.iter().zip(&gt).filter(|(p, g)| **p || **g).count();
        assert_eq!((i, u), (2, 6));
        assert!((iou(&pred, &gt).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn table_row_aggregation() {
        let row3 = [0.9996, 0.7325, 0.5828, 0.6952, 0.5453, 0.6105];
        assert!((overall_miou(&row3) - 0.6943).abs() < 5e-5);
        let row2 = [0.9996, 0.7030, 0.5687, 0.6778, 0.5094, 0.5765];
        assert!((overall_miou(&row2) - 0.6725).abs() < 5e-5);
    }

    #[test]
    fn report_rejects_empty() {
        assert!(matches!(IoUReport::from_rows(vec![]), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn symmetric_and_monotone(
            a in proptest::collection::vec(any::<bool>(), 25),
            b in proptest::collection::vec(any::<bool>(), 25),
            idx in 0usize..25,
        ) {
            prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
            if a.iter().any(|&v| v) {
                prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
            }
            let base = iou(&a, &b).unwrap();
            let mut grown = a.clone();
            grown[idx] = true;
            let after = iou(&grown, &b).unwrap();
            if !a[idx] {
                if b[idx] {
                    prop_assert!(after >= base);
                } else {
                    prop_assert!(after <= base);
                }
            }
        }
    }
}
