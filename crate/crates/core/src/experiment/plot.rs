//! Raster figures: segmentation overlays, per-image IoU traces and the
//! method-comparison bar chart. All drawing is integer-exact so a figure is a
//! pure function of its data.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::metrics::IoUReport;
use crate::types::NormalizedImage;

/// Bumped whenever the look of any figure changes.
pub const STYLE_VERSION: u32 = 1;

pub const CLASS_COLORS: [[u8; 3]; 6] = [
    [90, 90, 90],
    [228, 26, 28],
    [55, 126, 184],
    [77, 175, 74],
    [152, 78, 163],
    [255, 127, 0],
];

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([0, 0, 0]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

pub(crate) fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

fn fill_rect(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    for y in y0.max(0)..y1.min(h) {
        for x in x0.max(0)..x1.min(w) {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

fn line(img: &mut RgbImage, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let (w, h) = (img.width() as i64, img.height() as i64);
    loop {
        if (0..w).contains(&x0) && (0..h).contains(&y0) {
            img.put_pixel(x0 as u32, y0 as u32, c);
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Ground truth only in red, prediction only in green, both in yellow, the
/// rest as grayscale. With `crop`, the result is cut to the bounding box of
/// both masks padded by 10 px.
pub fn render_overlay(
    image: &NormalizedImage,
    gt: &[bool],
    pred: &[bool],
    crop: bool,
) -> Result<RgbImage> {
    let (w, h) = (image.width(), image.height());
    if gt.len() != w * h || pred.len() != w * h {
        return Err(Error::Shape(format!(
            "masks of {} and {} pixels for a {w}x{h} image",
            gt.len(),
            pred.len()
        )));
    }
    let (mut x0, mut y0, mut x1, mut y1) = (0, 0, w, h);
    if crop {
        let on: Vec<usize> = (0..w * h).filter(|&i| gt[i] || pred[i]).collect();
        if !on.is_empty() {
            const PAD: usize = 10;
            x0 = on.iter().map(|i| i % w).min().unwrap().saturating_sub(PAD);
            x1 = (on.iter().map(|i| i % w).max().unwrap() + PAD + 1).min(w);
            y0 = on.iter().map(|i| i / w).min().unwrap().saturating_sub(PAD);
            y1 = (on.iter().map(|i| i / w).max().unwrap() + PAD + 1).min(h);
        }
    }
    let mut out = RgbImage::new((x1 - x0) as u32, (y1 - y0) as u32);
    for y in y0..y1 {
        for x in x0..x1 {
            let i = y * w + x;
            let c = match (gt[i], pred[i]) {
                (true, true) => Rgb([255, 255, 0]),
                (true, false) => Rgb([255, 0, 0]),
                (false, true) => Rgb([0, 255, 0]),
                (false, false) => {
                    let g = (image.pixels()[i].clamp(0.0, 1.0) * 255.0).round() as u8;
                    Rgb([g, g, g])
                }
            };
            out.put_pixel((x - x0) as u32, (y - y0) as u32, c);
        }
    }
    Ok(out)
}

const MARGIN: i64 = 20;

fn frame(w: u32, h: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(w, h, WHITE);
    let (w, h) = (w as i64, h as i64);
    for k in 0..=10 {
        let y = h - MARGIN - (h - 2 * MARGIN) * k / 10;
        line(&mut img, (MARGIN, y), (w - MARGIN, y), GRID);
    }
    line(&mut img, (MARGIN, h - MARGIN), (w - MARGIN, h - MARGIN), AXIS);
    line(&mut img, (MARGIN, MARGIN), (MARGIN, h - MARGIN), AXIS);
    img
}

fn y_of(v: f64, h: i64) -> i64 {
    h - MARGIN - (v.clamp(0.0, 1.0) * (h - 2 * MARGIN) as f64).round() as i64
}

/// Per-class IoU traced over image index (one colour per class, the y axis
/// spans 0..1 with gridlines every 0.1).
pub fn render_iou_plot(report: &IoUReport) -> Result<RgbImage> {
    let n = report.per_image.len();
    if n == 0 {
        return Err(Error::Contract("cannot plot an empty report".into()));
    }
    let (w, h) = (640u32, 360u32);
    let mut img = frame(w, h);
    let span = (w as i64 - 2 * MARGIN - 10).max(1);
    let x_of = |i: usize| {
        if n == 1 {
            MARGIN + 5 + span / 2
        } else {
            MARGIN + 5 + span * i as i64 / (n as i64 - 1)
        }
    };
    for c in 0..report.num_classes() {
        let col = Rgb(CLASS_COLORS[c % CLASS_COLORS.len()]);
        let mut prev = None;
        for (i, row) in report.per_image.iter().enumerate() {
            let p = (x_of(i), y_of(row[c], h as i64));
            if let Some(q) = prev {
                line(&mut img, q, p, col);
            }
            fill_rect(&mut img, p.0 - 1, p.1 - 1, p.0 + 2, p.1 + 2, col);
            prev = Some(p);
        }
    }
    Ok(img)
}

/// Writes the trace plot and its backing CSV.
pub fn plot_per_image_iou(report: &IoUReport, png: &Path, csv: &Path) -> Result<()> {
    let img = render_iou_plot(report)?;
    report.write_csv(csv)?;
    save_rgb(&img, png)
}

/// Grouped bars: one group per class, one bar per series, with a whisker
/// spanning mean ± std. Series colours come from the marker palette.
pub fn render_bar_chart(series: &[(Vec<f64>, Vec<f64>)]) -> Result<RgbImage> {
    let Some(nc) = series.first().map(|s| s.0.len()) else {
        return Err(Error::Contract("nothing to plot".into()));
    };
    if series.iter().any(|(m, s)| m.len() != nc || s.len() != nc) {
        return Err(Error::Shape("series of differing class counts".into()));
    }
    let (w, h) = (720u32, 360u32);
    let mut img = frame(w, h);
    let group = (w as i64 - 2 * MARGIN) / nc as i64;
    let bar = ((group - 10) / series.len() as i64).max(1);
    let base = h as i64 - MARGIN;
    for c in 0..nc {
        for (k, (mean, std)) in series.iter().enumerate() {
            let col = Rgb(CLASS_COLORS[(k + 1) % CLASS_COLORS.len()]);
            let x0 = MARGIN + c as i64 * group + 5 + k as i64 * bar;
            let top = y_of(mean[c], h as i64);
            fill_rect(&mut img, x0 + 1, top, x0 + bar - 1, base, col);
            let xm = x0 + bar / 2;
            let (lo, hi) = (y_of(mean[c] - std[c], h as i64), y_of(mean[c] + std[c], h as i64));
            line(&mut img, (xm, lo), (xm, hi), AXIS);
            line(&mut img, (xm - 2, lo), (xm + 2, lo), AXIS);
            line(&mut img, (xm - 2, hi), (xm + 2, hi), AXIS);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(w: usize, h: usize) -> NormalizedImage {
        NormalizedImage::new(w, h, vec![0.5; w * h]).unwrap()
    }

    #[test]
    fn overlay_colours() {
        let img = gray(4, 1);
        let same = [false, true, true, false];
        let o = render_overlay(&img, &same, &same, false).unwrap();
        assert_eq!(o.get_pixel(1, 0), &Rgb([255, 255, 0]));
        assert_eq!(o.get_pixel(0, 0), &Rgb([128, 128, 128]));
        let o = render_overlay(&img, &[true, false, false, false], &[false, false, true, false], false)
            .unwrap();
        assert_eq!(o.get_pixel(0, 0), &Rgb([255, 0, 0]));
        assert_eq!(o.get_pixel(2, 0), &Rgb([0, 255, 0]));
        assert!(o.pixels().all(|p| *p != Rgb([255, 255, 0])));
        let o = render_overlay(&img, &[true, false, false, false], &[false; 4], false).unwrap();
        assert!(o.pixels().all(|p| *p != Rgb([0, 255, 0])));
        assert!(render_overlay(&img, &[true], &[false; 4], false).is_err());
    }

    #[test]
    fn overlay_crop_pads_ten() {
        let img = gray(64, 64);
        let mut m = vec![false; 64 * 64];
        m[30 * 64 + 30] = true;
        m[32 * 64 + 33] = true;
        let o = render_overlay(&img, &m, &m, true).unwrap();
        assert_eq!(o.dimensions(), (24, 23));
        assert_eq!(o.get_pixel(10, 10), &Rgb([255, 255, 0]));
        let mut corner = vec![false; 64 * 64];
        corner[0] = true;
        assert_eq!(render_overlay(&img, &corner, &corner, true).unwrap().dimensions(), (11, 11));
    }

    #[test]
    fn iou_plot_regenerates_from_csv() {
        let rows = (0..7)
            .map(|i| (format!("im{i}"), (0..6).map(|c| ((i * 7 + c * 3) % 10) as f64 / 9.7).collect()))
            .collect();
        let r = IoUReport::from_rows(rows).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (png, csv) = (dir.path().join("p.png"), dir.path().join("p.csv"));
        plot_per_image_iou(&r, &png, &csv).unwrap();
        let back = IoUReport::read_csv(&csv).unwrap();
        assert_eq!(back.per_image.len(), 7);
        let a = image::open(&png).unwrap().to_rgb8();
        assert_eq!(render_iou_plot(&back).unwrap(), a);
    }

    #[test]
    fn perfect_report_is_flat() {
        let r = IoUReport::from_rows(vec![
            ("a".into(), vec![1.0; 6]),
            ("b".into(), vec![1.0; 6]),
        ])
        .unwrap();
        let img = render_iou_plot(&r).unwrap();
        let top = y_of(1.0, img.height() as i64) as u32;
        let below = (top + 5..img.height() - MARGIN as u32)
            .any(|y| (0..img.width()).any(|x| CLASS_COLORS.iter().any(|c| img.get_pixel(x, y).0 == *c)));
        assert!(!below);
    }
}
