//! Experiment orchestration: the ablation grid, the method comparison, and
//! centre export with per-image latency.

mod grid;
pub mod plot;

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, Split};
use crate::metrics::{
    center_errors, extract_centers, write_centers_csv, CenterPair, CenterSummary, IoUReport,
    Segmenter, DEFAULT_THRESHOLD_MM,
};
use crate::pipeline::{enhance, EnhanceConfig};
use crate::types::Normalization;

pub use grid::{
    cell_dir, evaluate_row, run_grid, Cell, ExperimentGrid, GridOptions, GridResults, Recipe,
    ResultRow,
};
pub use plot::{plot_per_image_iou, render_bar_chart, render_iou_plot, render_overlay};

/// Per-class mean and standard deviation of per-image IoU for one method,
/// pooled over every report given for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodStats {
    pub method: String,
    pub images: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// In the order the methods were requested.
    pub stats: Vec<MethodStats>,
    /// Requested methods with no report.
    pub absent: Vec<String>,
}

/// Groups reports by method and summarizes each requested method.
pub fn compare_methods(reports: &[(String, IoUReport)], methods: &[String]) -> Result<Comparison> {
    let mut stats = Vec::new();
    let mut absent = Vec::new();
    for m in methods {
        let rows: Vec<&Vec<f64>> = reports
            .iter()
            .filter(|(name, _)| name == m)
            .flat_map(|(_, r)| r.per_image.iter())
            .collect();
        if rows.is_empty() {
            absent.push(m.clone());
            continue;
        }
        let nc = rows[0].len();
        if rows.iter().any(|r| r.len() != nc) {
            return Err(Error::Shape(format!("{m}: reports with differing class counts")));
        }
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..nc).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n).collect();
        let std = (0..nc)
            .map(|c| (rows.iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / n).sqrt())
            .collect();
        stats.push(MethodStats {
            method: m.clone(),
            images: rows.len(),
            mean,
            std,
        });
    }
    Ok(Comparison { stats, absent })
}

impl Comparison {
    pub fn get(&self, method: &str) -> Option<&MethodStats> {
        self.stats.iter().find(|s| s.method == method)
    }

    /// `comparison.csv` (method, class, mean, std, images), `comparison.json`
    /// and the bar chart `comparison.png`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("comparison.csv");
        let err = |e: csv::Error| crate::metrics::iou::csv_err(&path, e);
        let mut w = csv::Writer::from_path(&path).map_err(err)?;
        w.write_record(["method", "class", "mean_iou", "std_iou", "images"]).map_err(err)?;
        for s in &self.stats {
            for c in 0..s.mean.len() {
                w.write_record([
                    s.method.clone(),
                    c.to_string(),
                    s.mean[c].to_string(),
                    s.std[c].to_string(),
                    s.images.to_string(),
                ])
                .map_err(err)?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let json = dir.join("comparison.json");
        std::fs::write(&json, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        if !self.stats.is_empty() {
            let series: Vec<(Vec<f64>, Vec<f64>)> =
                self.stats.iter().map(|s| (s.mean.clone(), s.std.clone())).collect();
            plot::save_rgb(&render_bar_chart(&series)?, &dir.join("comparison.png"))?;
        }
        Ok(())
    }
}

/// Centre table plus per-image inference latency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterExport {
    pub summary: CenterSummary,
    /// `(image_id, milliseconds)` in manifest order.
    pub latency_ms: Vec<(String, f64)>,
    pub mean_latency_ms: f64,
    pub max_latency_ms: f64,
}

/// Segments every frame of `split`, extracts centres, scores them against the
/// manifest ground truth and writes the centres CSV to `out_path` with
/// `latency.csv` next to it.
pub fn export_centers(
    model: &dyn Segmenter,
    manifest: &DatasetManifest,
    split: Split,
    norm: Normalization,
    enhancement: Option<&EnhanceConfig>,
    out_path: &Path,
) -> Result<CenterExport> {
    let mut pairs = Vec::new();
    let mut latency_ms = Vec::new();
    for f in manifest.frames_in(split) {
        let mut s = manifest.load_sample(f, norm)?;
        if let Some(cfg) = enhancement {
            s.image = enhance(&s.image, cfg)?;
        }
        let t = Instant::now();
        let seg = model.segment(&f.id, &s.image)?;
        latency_ms.push((f.id.clone(), t.elapsed().as_secs_f64() * 1e3));
        let found = extract_centers(&seg);
        for gt in &f.gt_centers {
            let predicted = found
                .iter()
                .find(|c| c.class_id == gt.class_id)
                .and_then(|c| c.center);
            pairs.push(CenterPair {
                image_id: f.id.clone(),
                class_id: gt.class_id,
                predicted,
                ground_truth: (gt.x_px, gt.y_px),
            });
        }
    }
    if latency_ms.is_empty() {
        return Err(Error::Contract(format!("no {split:?} frames to export")));
    }
    let summary = center_errors(&pairs, manifest.header.pixel_pitch_mm, DEFAULT_THRESHOLD_MM)?;
    write_centers_csv(out_path, &summary.records)?;
    let lat_path = out_path.with_file_name("latency.csv");
    let err = |e: csv::Error| crate::metrics::iou::csv_err(&lat_path, e);
    let mut w = csv::Writer::from_path(&lat_path).map_err(err)?;
    w.write_record(["image_id", "latency_ms"]).map_err(err)?;
    for (id, ms) in &latency_ms {
        w.write_record([id.clone(), format!("{ms:.4}")]).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(&lat_path, e))?;
    let mean_latency_ms = latency_ms.iter().map(|l| l.1).sum::<f64>() / latency_ms.len() as f64;
    let max_latency_ms = latency_ms.iter().map(|l| l.1).fold(0.0, f64::max);
    Ok(CenterExport {
        summary,
        latency_ms,
        mean_latency_ms,
        max_latency_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{read_centers_csv, OracleSegmenter};
    use crate::synth::{write_dataset, SceneConfig, SplitRule};

    fn report(rows: &[[f64; 2]]) -> IoUReport {
        IoUReport::from_rows(
            rows.iter()
                .enumerate()
                .map(|(i, r)| (format!("i{i}"), r.to_vec()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn comparison_stats() {
        let a = report(&[[1.0, 0.5], [1.0, 0.7]]);
        let reports = vec![("A".to_string(), a.clone()), ("B".to_string(), a)];
        let c = compare_methods(&reports, &["A".into(), "B".into(), "C".into()]).unwrap();
        assert_eq!(c.absent, vec!["C".to_string()]);
        assert_eq!(c.get("A"), c.get("B").map(|s| MethodStats { method: "A".into(), ..s.clone() }).as_ref());
        let s = c.get("A").unwrap();
        assert!((s.mean[1] - 0.6).abs() < 1e-12);
        assert!((s.std[1] - 0.1).abs() < 1e-12);
        let single = compare_methods(&[("X".into(), report(&[[0.3, 0.9]]))], &["X".into()]).unwrap();
        assert_eq!(single.stats[0].std, vec![0.0, 0.0]);
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2 * 2);
        assert!(dir.path().join("comparison.png").exists());
    }

    #[test]
    fn oracle_centres_are_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig {
            n_setups: 2,
            view_angles: vec![-70.0, 0.0, 45.0],
            ..SceneConfig::desk()
        };
        let m = write_dataset(&cfg, &SplitRule::Count { test_setups: 1 }, &dir.path().join("d")).unwrap();
        let oracle = OracleSegmenter {
            labels: m
                .load_split(Split::Test, Normalization::Paper)
                .unwrap()
                .into_iter()
                .map(|(id, s)| (id, s.labels))
                .collect(),
        };
        let out = dir.path().join("out/centers.csv");
        std::fs::create_dir_all(out.parent().unwrap()).unwrap();
        let e = export_centers(&oracle, &m, Split::Test, Normalization::Paper, None, &out).unwrap();
        assert_eq!(e.summary.records.len(), 3 * 5);
        assert!(e.summary.records.iter().all(|r| r.error_px.unwrap() < 1e-9));
        assert_eq!(e.summary.detection_rate, 1.0);
        assert_eq!(read_centers_csv(&out).unwrap(), e.summary.records);
        let lat = std::fs::read_to_string(dir.path().join("out/latency.csv")).unwrap();
        assert_eq!(lat.lines().count(), 4);
        assert!(e.max_latency_ms >= e.mean_latency_ms);
    }
}
