use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::NormalizedImage;

/// Percentile stretch followed by contrast-limited adaptive histogram
/// equalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnhanceConfig {
    pub low_fraction: f64,
    pub high_fraction: f64,
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Normalized clip limit in `[0, 1]`.
    pub clip_limit: f64,
    pub bins: usize,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self {
            low_fraction: 0.01,
            high_fraction: 0.99,
            tiles_x: 8,
            tiles_y: 8,
            clip_limit: 0.01,
            bins: 256,
        }
    }
}

impl EnhanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.low_fraction && self.low_fraction < self.high_fraction && self.high_fraction <= 1.0) {
            return Err(Error::Config("need 0 <= low_fraction < high_fraction <= 1".into()));
        }
        if self.tiles_x == 0 || self.tiles_y == 0 || self.bins < 2 {
            return Err(Error::Config("need at least one tile and two bins".into()));
        }
        if !(0.0..=1.0).contains(&self.clip_limit) {
            return Err(Error::Config("clip_limit must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Intensity values at the given fractions of the sorted pixels.
fn percentiles(px: &[f32], lo: f64, hi: f64) -> (f32, f32) {
    let mut v = px.to_vec();
    v.sort_by(f32::total_cmp);
    let n = v.len() - 1;
    let at = |f: f64| v[((f * n as f64).round() as usize).min(n)];
    (at(lo), at(hi))
}

/// Maps the low/high percentiles to 0 and 1, clipping outside. `None` when
/// they coincide.
pub fn percentile_rescale(img: &NormalizedImage, cfg: &EnhanceConfig) -> Option<NormalizedImage> {
    let (lo, hi) = percentiles(img.pixels(), cfg.low_fraction, cfg.high_fraction);
    if !(hi > lo) {
        return None;
    }
    let px = img
        .pixels()
        .iter()
        .map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
        .collect();
    Some(NormalizedImage::new(img.width(), img.height(), px).expect("values clamped"))
}

/// Tile boundaries splitting `n` pixels into `k` near-equal runs.
fn bounds(n: usize, k: usize) -> Vec<usize> {
    (0..=k).map(|t| t * n / k).collect()
}

pub fn clahe(img: &NormalizedImage, cfg: &EnhanceConfig) -> Result<NormalizedImage> {
    cfg.validate()?;
    let (w, h) = (img.width(), img.height());
    let tx = cfg.tiles_x.min(w);
    let ty = cfg.tiles_y.min(h);
    let bx = bounds(w, tx);
    let by = bounds(h, ty);
    let nb = cfg.bins;
    let bin = |v: f32| ((v as f64 * (nb - 1) as f64).round() as usize).min(nb - 1);
    let px = img.pixels();

    // per-tile mapping from bin to output level
    let mut maps = vec![vec![0f64; nb]; tx * ty];
    for j in 0..ty {
        for i in 0..tx {
            let mut hist = vec![0usize; nb];
            for y in by[j]..by[j + 1] {
                for x in bx[i]..bx[i + 1] {
                    hist[bin(px[y * w + x])] += 1;
                }
            }
            let n = (by[j + 1] - by[j]) * (bx[i + 1] - bx[i]);
            let min_clip = n.div_ceil(nb);
            let limit = min_clip + (cfg.clip_limit * (n - min_clip) as f64).round() as usize;
            let mut excess = 0usize;
            for c in hist.iter_mut() {
                if *c > limit {
                    excess += *c - limit;
                    *c = limit;
                }
            }
            let (each, rest) = (excess / nb, excess % nb);
            for (b, c) in hist.iter_mut().enumerate() {
                *c += each + usize::from(b < rest);
            }
            let map = &mut maps[j * tx + i];
            let mut acc = 0usize;
            for b in 0..nb {
                acc += hist[b];
                map[b] = (acc as f64 / n as f64).min(1.0);
            }
        }
    }

    let cx: Vec<f64> = (0..tx).map(|i| (bx[i] + bx[i + 1] - 1) as f64 / 2.0).collect();
    let cy: Vec<f64> = (0..ty).map(|j| (by[j] + by[j + 1] - 1) as f64 / 2.0).collect();
    // neighbouring tile pair and weight of the second along one axis
    let locate = |c: &[f64], p: f64| -> (usize, usize, f64) {
        if p <= c[0] {
            return (0, 0, 0.0);
        }
        let last = c.len() - 1;
        if p >= c[last] {
            return (last, last, 0.0);
        }
        let k = c.partition_point(|&v| v <= p) - 1;
        (k, k + 1, (p - c[k]) / (c[k + 1] - c[k]))
    };
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (j0, j1, fy) = locate(&cy, y as f64);
        for x in 0..w {
            let (i0, i1, fx) = locate(&cx, x as f64);
            let b = bin(px[y * w + x]);
            let m = |i: usize, j: usize| maps[j * tx + i][b];
            let top = m(i0, j0) * (1.0 - fx) + m(i1, j0) * fx;
            let bot = m(i0, j1) * (1.0 - fx) + m(i1, j1) * fx;
            out.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0) as f32);
        }
    }
    NormalizedImage::new(w, h, out)
}

/// Percentile rescale then CLAHE. A constant image is returned unchanged.
pub fn enhance(img: &NormalizedImage, cfg: &EnhanceConfig) -> Result<NormalizedImage> {
    cfg.validate()?;
    match percentile_rescale(img, cfg) {
        Some(r) => clahe(&r, cfg),
        None => Ok(img.clone()),
    }
}
