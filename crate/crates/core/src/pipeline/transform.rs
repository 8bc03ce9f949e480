use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::quantize16;
use crate::synth::GtCenter;
use crate::types::{LabelMap, NormalizedImage};

/// Mirror applied after rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flip {
    None,
    /// Mirror left-right.
    Horizontal,
    /// Mirror top-bottom.
    Vertical,
}

impl Flip {
    pub fn code(self) -> char {
        match self {
            Flip::None => 'n',
            Flip::Horizontal => 'h',
            Flip::Vertical => 'v',
        }
    }
}

/// Exact sine and cosine at multiples of 90 degrees.
fn sin_cos_deg(theta: f64) -> (f64, f64) {
    let r = theta.rem_euclid(360.0);
    match r {
        r if r == 0.0 => (0.0, 1.0),
        r if r == 90.0 => (1.0, 0.0),
        r if r == 180.0 => (0.0, -1.0),
        r if r == 270.0 => (-1.0, 0.0),
        _ => theta.to_radians().sin_cos(),
    }
}

fn center(w: usize, h: usize) -> (f64, f64) {
    ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
}

/// Where the point `(x, y)` lands after a counter-clockwise (as displayed)
/// rotation by `theta` degrees about the frame centre.
pub fn rotate_point(x: f64, y: f64, theta: f64, w: usize, h: usize) -> (f64, f64) {
    let (s, c) = sin_cos_deg(theta);
    let (cx, cy) = center(w, h);
    let (dx, dy) = (x - cx, y - cy);
    (cx + dx * c + dy * s, cy - dx * s + dy * c)
}

/// Rotates an image (bilinear, fill = image minimum) and its labels
/// (nearest neighbour, fill = background) about the frame centre.
pub fn rotate_pair(
    img: &NormalizedImage,
    labels: &LabelMap,
    theta: f64,
) -> Result<(NormalizedImage, LabelMap)> {
    let (w, h) = (img.width(), img.height());
    if (labels.width(), labels.height()) != (w, h) {
        return Err(Error::Shape(format!(
            "image {w}x{h} vs labels {}x{}",
            labels.width(),
            labels.height()
        )));
    }
    if !(theta.abs() <= 180.0) {
        return Err(Error::InvalidInput(format!("rotation {theta} outside [-180, 180]")));
    }
    if theta == 0.0 {
        return Ok((img.clone(), labels.clone()));
    }
    let (s, c) = sin_cos_deg(theta);
    let (cx, cy) = center(w, h);
    let fill = img.min_max().0;
    let src = img.pixels();
    let ids = labels.ids();
    let eps = 1e-9;
    let (wf, hf) = (w as f64 - 1.0, h as f64 - 1.0);
    let mut out = Vec::with_capacity(w * h);
    let mut out_ids = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = cx + dx * c - dy * s;
            let sy = cy + dx * s + dy * c;
            if sx < -eps || sy < -eps || sx > wf + eps || sy > hf + eps {
                out.push(fill);
            } else {
                let sx = sx.clamp(0.0, wf);
                let sy = sy.clamp(0.0, hf);
                let x0 = (sx.floor() as usize).min(w.saturating_sub(2));
                let y0 = (sy.floor() as usize).min(h.saturating_sub(2));
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                out.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
            }
            let (nx, ny) = (sx.round(), sy.round());
            if nx < 0.0 || ny < 0.0 || nx > wf || ny > hf {
                out_ids.push(0);
            } else {
                out_ids.push(ids[ny as usize * w + nx as usize]);
            }
        }
    }
    Ok((
        NormalizedImage::new(w, h, out)?,
        LabelMap::new(w, h, labels.num_classes(), out_ids)?,
    ))
}

fn flip_grid<T: Copy>(data: &[T], w: usize, h: usize, flip: Flip) -> Vec<T> {
    match flip {
        Flip::None => data.to_vec(),
        Flip::Horizontal => (0..h)
            .flat_map(|y| (0..w).rev().map(move |x| data[y * w + x]))
            .collect(),
        Flip::Vertical => (0..h).rev().flat_map(|y| data[y * w..(y + 1) * w].to_vec()).collect(),
    }
}

pub fn flip_pair(
    img: &NormalizedImage,
    labels: &LabelMap,
    flip: Flip,
) -> Result<(NormalizedImage, LabelMap)> {
    let (w, h) = (img.width(), img.height());
    Ok((
        NormalizedImage::new(w, h, flip_grid(img.pixels(), w, h, flip))?,
        LabelMap::new(w, h, labels.num_classes(), flip_grid(labels.ids(), w, h, flip))?,
    ))
}

/// The derived-frame transform: rotate, flip, then quantize the image to the
/// 16-bit grid so stored and on-the-fly frames agree bit for bit.
pub fn apply_transform(
    img: &NormalizedImage,
    labels: &LabelMap,
    theta_deg: i32,
    flip: Flip,
) -> Result<(NormalizedImage, LabelMap)> {
    let (r_img, r_lab) = rotate_pair(img, labels, theta_deg as f64)?;
    let (f_img, f_lab) = flip_pair(&r_img, &r_lab, flip)?;
    Ok((quantize16(&f_img), f_lab))
}

/// Moves ground-truth centres with the transform, dropping any that leave
/// the frame.
pub fn transform_centers(
    centers: &[GtCenter],
    theta_deg: i32,
    flip: Flip,
    w: usize,
    h: usize,
) -> Vec<GtCenter> {
    centers
        .iter()
        .filter_map(|c| {
            let (mut x, mut y) = rotate_point(c.x_px, c.y_px, theta_deg as f64, w, h);
            match flip {
                Flip::None => {}
                Flip::Horizontal => x = w as f64 - 1.0 - x,
                Flip::Vertical => y = h as f64 - 1.0 - y,
            }
            let inside = x >= 0.0 && y >= 0.0 && x <= w as f64 - 1.0 && y <= h as f64 - 1.0;
            inside.then_some(GtCenter {
                class_id: c.class_id,
                x_px: x,
                y_px: y,
            })
        })
        .collect()
}
