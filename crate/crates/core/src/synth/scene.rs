use std::f64::consts::{PI, TAU};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::marker::{render_marker, MarkerPose};
use super::{sub_seed, SceneConfig};
use crate::error::{Error, Result};
use crate::types::{GrayImage, LabelMap};

/// Ground-truth centre of one marker (pixels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtCenter {
    pub class_id: u8,
    pub x_px: f64,
    pub y_px: f64,
}

/// One rendered frame with its exact labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub id: String,
    pub setup_id: usize,
    pub view_angle_deg: f64,
    pub image: GrayImage,
    pub labels: LabelMap,
    pub gt_centers: Vec<GtCenter>,
}

/// Stable frame name, e.g. `s03_a-090`.
pub fn frame_id(setup_id: usize, angle_deg: f64) -> String {
    format!("s{setup_id:02}_a{:+04}", angle_deg.round() as i64)
}

struct PlacedMarker {
    class_idx: usize,
    psi: f64,
    z: f64,
    spin: f64,
}

struct Segment {
    cx: f64,
    cy: f64,
    radius: f64,
    tilt: f64,
    markers: Vec<PlacedMarker>,
    z_range: (f64, f64),
}

impl Segment {
    /// Image position of a point on the cylinder at azimuth `psi`, height `z`.
    fn project(&self, psi: f64, z: f64, view: f64) -> (f64, f64) {
        let xl = self.radius * (psi + view).sin();
        let (s, c) = self.tilt.sin_cos();
        (self.cx + c * xl - s * z, self.cy + s * xl + c * z)
    }
}

struct Layout {
    segments: Vec<Segment>,
    mesh_angle: f64,
}

fn sample_segment(cfg: &SceneConfig, rng: &mut ChaCha8Rng, margin: f64) -> Result<Segment> {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let n = cfg.markers.len();
    let d = cfg.min_marker_distance_px;
    let radius = rng.random_range(0.08..0.15) * w.min(h);
    let tilt = rng.random_range(-25.0f64..25.0).to_radians();
    // heights at least `d` apart, so projected markers keep the minimum distance
    let mut z = 0.0;
    let mut heights = Vec::with_capacity(n);
    for k in 0..n {
        if k > 0 {
            z += d * rng.random_range(1.0..1.4);
        }
        heights.push(z);
    }
    let mid = z / 2.0;
    heights.iter_mut().for_each(|v| *v -= mid);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let markers = order
        .into_iter()
        .zip(&heights)
        .map(|(class_idx, &z)| PlacedMarker {
            class_idx,
            psi: rng.random_range(0.0..TAU),
            z,
            spin: rng.random_range(0.0..TAU),
        })
        .collect();
    let (s, c) = tilt.sin_cos();
    let (mut ex, mut ey) = (0.0f64, 0.0f64);
    for xl in [-radius, radius] {
        for zz in [-mid, mid] {
            ex = ex.max((c * xl - s * zz).abs());
            ey = ey.max((s * xl + c * zz).abs());
        }
    }
    let (xlo, xhi) = (ex + margin, w - 1.0 - ex - margin);
    let (ylo, yhi) = (ey + margin, h - 1.0 - ey - margin);
    if xlo > xhi || ylo > yhi {
        return Err(Error::Placement(format!(
            "a stent segment does not fit a {}x{} frame",
            cfg.width, cfg.height
        )));
    }
    Ok(Segment {
        cx: rng.random_range(xlo..=xhi),
        cy: rng.random_range(ylo..=yhi),
        radius,
        tilt,
        markers,
        z_range: (-mid, mid),
    })
}

fn layout(cfg: &SceneConfig, setup_id: usize, mags: &[f64]) -> Result<Layout> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &[setup_id as i64]));
    let margin = cfg
        .markers
        .iter()
        .zip(mags)
        .map(|(m, g)| m.extent_mm().map(|e| e * g / cfg.pixel_pitch_mm))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max)
        + 2.0;
    let mut segments: Vec<Segment> = Vec::new();
    for _ in 0..cfg.stent_segments {
        let mut placed = None;
        for _attempt in 0..200 {
            let seg = sample_segment(cfg, &mut rng, margin)?;
            let clear = cfg.allow_overlap
                || cfg.view_angles.iter().all(|&a| {
                    let view = a.to_radians();
                    segments.iter().all(|other| {
                        seg.markers.iter().all(|m| {
                            let p = seg.project(m.psi, m.z, view);
                            other.markers.iter().all(|o| {
                                let q = other.project(o.psi, o.z, view);
                                (p.0 - q.0).hypot(p.1 - q.1) >= cfg.min_marker_distance_px
                            })
                        })
                    })
                });
            if clear {
                placed = Some(seg);
                break;
            }
        }
        segments.push(placed.ok_or_else(|| {
            Error::Placement(format!(
                "could not separate {} stent segments in setup {setup_id}",
                cfg.stent_segments
            ))
        })?);
    }
    Ok(Layout {
        segments,
        mesh_angle: rng.random_range(0.0..PI),
    })
}

/// Multiplicative wire attenuation in `[0, wire_amplitude]`.
fn wire_attenuation(cfg: &SceneConfig, lay: &Layout, view: f64) -> Vec<f64> {
    let (w, h) = (cfg.width, cfg.height);
    let b = &cfg.background;
    let mut att = vec![0.0f64; w * h];
    if b.wire_amplitude == 0.0 {
        return att;
    }
    let sigma = b.wire_width_px.max(0.3);
    let reach = (2.5 * sigma).ceil() as isize;
    for seg in &lay.segments {
        let spacing = (0.9 * seg.radius).max(4.0);
        let (z0, z1) = (seg.z_range.0 - spacing / 2.0, seg.z_range.1 + spacing / 2.0);
        let rings = ((z1 - z0) / spacing).ceil() as usize + 1;
        let amp = 0.3 * spacing;
        let steps = (TAU * seg.radius * 3.0).ceil() as usize;
        for r in 0..rings {
            let zr = z0 + r as f64 * spacing;
            for k in 0..steps {
                let psi = TAU * k as f64 / steps as f64;
                // triangle wave, 6 peaks around the circumference
                let t = (6.0 * psi / TAU).fract();
                let zz = zr + amp * (4.0 * (t - 0.5).abs() - 1.0);
                let (px, py) = seg.project(psi, zz, view);
                let (ix, iy) = (px.round() as isize, py.round() as isize);
                for yy in iy - reach..=iy + reach {
                    for xx in ix - reach..=ix + reach {
                        if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                            continue;
                        }
                        let d2 = (xx as f64 - px).powi(2) + (yy as f64 - py).powi(2);
                        let a = b.wire_amplitude * (-d2 / (2.0 * sigma * sigma)).exp();
                        let cell = &mut att[yy as usize * w + xx as usize];
                        *cell = cell.max(a);
                    }
                }
            }
        }
    }
    att
}

/// Renders one frame. Pure function of `(cfg, setup_id, angle_deg)`.
pub fn compose_frame(cfg: &SceneConfig, setup_id: usize, angle_deg: f64) -> Result<FrameRecord> {
    cfg.validate()?;
    if !cfg.view_angles.contains(&angle_deg) {
        return Err(Error::Config(format!(
            "view angle {angle_deg} is not one of the configured angles"
        )));
    }
    let mags = cfg.magnifications()?;
    let lay = layout(cfg, setup_id, &mags)?;
    let (w, h) = (cfg.width, cfg.height);
    let view = angle_deg.to_radians();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(
        cfg.seed,
        &[setup_id as i64, angle_deg.to_bits() as i64],
    ));

    let mut ids = vec![0u8; w * h];
    let mut gt_centers = Vec::new();
    for seg in &lay.segments {
        for m in &seg.markers {
            let spec = &cfg.markers[m.class_idx];
            let (x, y) = seg.project(m.psi, m.z, view);
            let f = cfg.min_foreshortening
                + (1.0 - cfg.min_foreshortening) * (m.psi + view).cos().abs();
            let pose = MarkerPose {
                x,
                y,
                rotation: m.spin,
                foreshortening: f,
                magnification: mags[m.class_idx],
            };
            let stamp = render_marker(spec, &pose, cfg.pixel_pitch_mm, w, h)?;
            for &(px, py) in &stamp.pixels {
                let cell = &mut ids[py * w + px];
                if *cell != 0 && !cfg.allow_overlap {
                    return Err(Error::Placement(format!(
                        "class {} overlaps class {} in setup {setup_id}",
                        spec.class_id, *cell
                    )));
                }
                *cell = spec.class_id;
            }
            gt_centers.push(GtCenter {
                class_id: spec.class_id,
                x_px: stamp.centroid.0,
                y_px: stamp.centroid.1,
            });
        }
    }
    gt_centers.sort_by_key(|c| c.class_id);

    let b = &cfg.background;
    let att = wire_attenuation(cfg, &lay, view);
    let (fx, fy) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let phase = rng.random_range(0.0..TAU);
    let (ms, mc) = lay.mesh_angle.sin_cos();
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let grad = (TAU * (fx * xf / w as f64 + fy * yf / h as f64) + phase).cos();
            let (u, v) = (mc * xf + ms * yf, -ms * xf + mc * yf);
            let mesh =
                0.5 * (1.0 + (TAU * u / b.mesh_period_px).sin() * (TAU * v / b.mesh_period_px).sin());
            let mut val = b.level
                * (1.0 + b.gradient_amplitude * grad)
                * (1.0 - b.mesh_amplitude * mesh)
                * (1.0 - att[y * w + x]);
            if ids[y * w + x] != 0 {
                val *= 1.0 - cfg.contrast;
            }
            let var = cfg.noise.gaussian_sigma.powi(2) + cfg.noise.poisson_scale * val;
            if var > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                val += var.sqrt() * z;
            }
            let mut q = val.round().clamp(0.0, 65535.0);
            if ids[y * w + x] == 0 && q < 1.0 {
                q = 1.0;
            }
            pixels.push(q as f32);
        }
    }
    Ok(FrameRecord {
        id: frame_id(setup_id, angle_deg),
        setup_id,
        view_angle_deg: angle_deg,
        image: GrayImage::new(w, h, pixels)?,
        labels: LabelMap::new(w, h, cfg.num_classes(), ids)?,
        gt_centers,
    })
}
