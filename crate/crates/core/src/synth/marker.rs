//! Marker geometry and rasterization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::components::{label_components, Connectivity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarkerShape {
    Circle,
    Sphere,
    Tube,
    Cross,
    Triangle,
}

/// Physical marker parameters in millimetres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerSpec {
    pub class_id: u8,
    pub shape: MarkerShape,
    pub hole_radius_mm: Option<f64>,
    pub thickness_mm: f64,
    pub length_mm: Option<f64>,
}

impl MarkerSpec {
    /// The five default markers in class order 1..=5.
    pub fn defaults() -> Vec<MarkerSpec> {
        use MarkerShape::*;
        vec![
            MarkerSpec {
                class_id: 1,
                shape: Circle,
                hole_radius_mm: Some(0.5),
                thickness_mm: 0.8,
                length_mm: Some(2.6),
            },
            MarkerSpec {
                class_id: 2,
                shape: Sphere,
                hole_radius_mm: Some(0.2),
                thickness_mm: 0.8,
                length_mm: None,
            },
            MarkerSpec {
                class_id: 3,
                shape: Tube,
                hole_radius_mm: Some(0.2),
                thickness_mm: 0.8,
                length_mm: Some(2.5),
            },
            MarkerSpec {
                class_id: 4,
                shape: Cross,
                hole_radius_mm: None,
                thickness_mm: 0.8,
                length_mm: Some(3.0),
            },
            MarkerSpec {
                class_id: 5,
                shape: Triangle,
                hole_radius_mm: Some(0.63),
                thickness_mm: 0.8,
                length_mm: Some(2.5),
            },
        ]
    }

    fn length(&self) -> Result<f64> {
        self.length_mm.ok_or_else(|| {
            Error::Config(format!("{:?} marker needs a length", self.shape))
        })
    }

    /// Triangle hole radius: the nominal hole, limited to half the inradius so
    /// a solid rim survives rasterization.
    fn triangle_hole(&self, side: f64) -> f64 {
        let inradius = side / (2.0 * 3f64.sqrt());
        self.hole_radius_mm.unwrap_or(0.0).min(0.5 * inradius)
    }

    /// Whether the local point `(u, v)` (mm, marker frame) is solid.
    ///
    /// Spheres and tubes are bored along their axis; the bore does not show in
    /// a side projection, so both render solid.
    pub fn contains(&self, u: f64, v: f64) -> Result<bool> {
        let t = self.thickness_mm;
        Ok(match self.shape {
            MarkerShape::Circle => {
                let r = (u * u + v * v).sqrt();
                let outer = self.length()? / 2.0;
                r <= outer && r >= self.hole_radius_mm.unwrap_or(0.0)
            }
            MarkerShape::Sphere => (u * u + v * v).sqrt() <= t / 2.0,
            MarkerShape::Tube => u.abs() <= self.length()? / 2.0 && v.abs() <= t / 2.0,
            MarkerShape::Cross => {
                let h = self.length()? / 2.0;
                (u.abs() <= h && v.abs() <= t / 2.0) || (v.abs() <= h && u.abs() <= t / 2.0)
            }
            MarkerShape::Triangle => {
                // equilateral, centroid at origin, apex towards -v
                let side = self.length()?;
                let inradius = side / (2.0 * 3f64.sqrt());
                let normals = [(0.0, -1.0), (0.866_025_403_784_438_6, 0.5), (-0.866_025_403_784_438_6, 0.5)];
                // edges opposite the apex directions
                let inside = normals.iter().all(|(nx, ny)| -(u * nx + v * ny) <= inradius);
                inside && (u * u + v * v).sqrt() >= self.triangle_hole(side)
            }
        })
    }

    /// Largest distance of any solid point from the marker centre (mm).
    pub fn extent_mm(&self) -> Result<f64> {
        Ok(match self.shape {
            MarkerShape::Circle => self.length()? / 2.0,
            MarkerShape::Sphere => self.thickness_mm / 2.0,
            MarkerShape::Tube => {
                let (a, b) = (self.length()? / 2.0, self.thickness_mm / 2.0);
                (a * a + b * b).sqrt()
            }
            MarkerShape::Cross => {
                let (a, b) = (self.length()? / 2.0, self.thickness_mm / 2.0);
                (a * a + b * b).sqrt()
            }
            MarkerShape::Triangle => self.length()? / 3f64.sqrt(),
        })
    }

    /// Projected footprint area (mm^2) seen face-on.
    pub fn footprint_area_mm2(&self) -> Result<f64> {
        use std::f64::consts::PI;
        let t = self.thickness_mm;
        Ok(match self.shape {
            MarkerShape::Circle => {
                let (r_out, r_in) = (self.length()? / 2.0, self.hole_radius_mm.unwrap_or(0.0));
                PI * (r_out * r_out - r_in * r_in)
            }
            MarkerShape::Sphere => PI * t * t / 4.0,
            MarkerShape::Tube => self.length()? * t,
            MarkerShape::Cross => 2.0 * self.length()? * t - t * t,
            MarkerShape::Triangle => {
                let side = self.length()?;
                let hole = self.triangle_hole(side);
                3f64.sqrt() / 4.0 * side * side - PI * hole * hole
            }
        })
    }
}

/// Placement of one marker in the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerPose {
    /// Centre in pixels.
    pub x: f64,
    pub y: f64,
    /// In-plane rotation (radians).
    pub rotation: f64,
    /// Compression of the image x axis in `(0, 1]`, emulating an oblique view.
    pub foreshortening: f64,
    /// Geometric magnification applied to the physical dimensions.
    pub magnification: f64,
}

impl MarkerPose {
    pub fn at(x: f64, y: f64) -> Self {
        Self {
            x,
            y,
            rotation: 0.0,
            foreshortening: 1.0,
            magnification: 1.0,
        }
    }
}

/// Binary footprint of a rendered marker.
#[derive(Debug, Clone, PartialEq)]
pub struct Stamp {
    /// `(x, y)` pixel coordinates, row-major order.
    pub pixels: Vec<(usize, usize)>,
    /// Mean of the pixel centres.
    pub centroid: (f64, f64),
}

/// `sin_cos` that is exact at multiples of a quarter turn.
fn quarter_exact_sin_cos(a: f64) -> (f64, f64) {
    let q = a / std::f64::consts::FRAC_PI_2;
    if (q - q.round()).abs() < 1e-12 {
        match (q.round() as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        a.sin_cos()
    }
}

/// Rasterizes a marker by pixel-centre sampling, keeping the largest
/// 4-connected piece so the stamp is always a single component.
pub fn render_marker(
    spec: &MarkerSpec,
    pose: &MarkerPose,
    pitch_mm: f64,
    width: usize,
    height: usize,
) -> Result<Stamp> {
    if !(pose.foreshortening > 0.0 && pose.foreshortening <= 1.0) {
        return Err(Error::Config(format!(
            "foreshortening {} outside (0, 1]",
            pose.foreshortening
        )));
    }
    if !(pitch_mm > 0.0) || !(pose.magnification > 0.0) {
        return Err(Error::Config("pitch and magnification must be > 0".into()));
    }
    let mm_per_px = pitch_mm / pose.magnification;
    let reach = spec.extent_mm()? / mm_per_px + 1.5;
    let x0 = (pose.x - reach).floor().max(0.0) as isize;
    let x1 = (pose.x + reach).ceil().min(width as f64 - 1.0) as isize;
    let y0 = (pose.y - reach).floor().max(0.0) as isize;
    let y1 = (pose.y + reach).ceil().min(height as f64 - 1.0) as isize;
    if x0 > x1 || y0 > y1 {
        return Err(Error::Placement(format!(
            "marker at ({:.1}, {:.1}) lies outside the {width}x{height} frame",
            pose.x, pose.y
        )));
    }
    let (s, c) = quarter_exact_sin_cos(pose.rotation);
    let bw = (x1 - x0 + 1) as usize;
    let bh = (y1 - y0 + 1) as usize;
    let mut mask = vec![false; bw * bh];
    for yy in 0..bh {
        for xx in 0..bw {
            let dx = (x0 as f64 + xx as f64 - pose.x) / pose.foreshortening;
            let dy = y0 as f64 + yy as f64 - pose.y;
            // undo the in-plane rotation
            let u = (c * dx + s * dy) * mm_per_px;
            let v = (-s * dx + c * dy) * mm_per_px;
            mask[yy * bw + xx] = spec.contains(u, v)?;
        }
    }
    let comps = label_components(&mask, bw, bh, Connectivity::Four);
    let Some(best) = comps.largest() else {
        return Err(Error::Placement(format!(
            "marker at ({:.1}, {:.1}) covers no pixel centre",
            pose.x, pose.y
        )));
    };
    let mut pixels: Vec<(usize, usize)> = comps.components[best]
        .pixels
        .iter()
        .map(|&p| ((p % bw) as isize + x0, (p / bw) as isize + y0))
        .map(|(x, y)| (x as usize, y as usize))
        .collect();
    pixels.sort_by_key(|&(x, y)| (y, x));
    let n = pixels.len() as f64;
    let cx = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let cy = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    Ok(Stamp {
        pixels,
        centroid: (cx, cy),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn spec(shape: MarkerShape) -> MarkerSpec {
        MarkerSpec::defaults()
            .into_iter()
            .find(|m| m.shape == shape)
            .unwrap()
    }

    #[test]
    fn default_table_values() {
        let m = MarkerSpec::defaults();
        assert_eq!(m.len(), 5);
        let holes: Vec<_> = m.iter().map(|s| s.hole_radius_mm).collect();
        assert_eq!(holes, vec![Some(0.5), Some(0.2), Some(0.2), None, Some(0.63)]);
        assert!(m.iter().all(|s| s.thickness_mm == 0.8));
        let lengths: Vec<_> = m.iter().map(|s| s.length_mm).collect();
        assert_eq!(lengths, vec![Some(2.6), None, Some(2.5), Some(3.0), Some(2.5)]);
        let ids: Vec<_> = m.iter().map(|s| s.class_id).collect();
        assert_eq!(ids, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn circle_at_native_pitch() {
        // 2.6 mm outer diameter at 0.8 mm/px is a ~3.25 px ring
        let st = render_marker(&spec(MarkerShape::Circle), &MarkerPose::at(20.0, 20.0), 0.8, 40, 40)
            .unwrap();
        let xs: Vec<_> = st.pixels.iter().map(|p| p.0).collect();
        let span = xs.iter().max().unwrap() - xs.iter().min().unwrap() + 1;
        assert!((3..=4).contains(&span), "span {span}");
        // hole radius 0.625 px excludes the centre pixel
        assert!(!st.pixels.contains(&(20, 20)));
        let area = spec(MarkerShape::Circle).footprint_area_mm2().unwrap() / 0.64;
        assert!((st.pixels.len() as f64 - area).abs() <= 4.0);

        // magnified, the ring resolves to tens of pixels
        let pose = MarkerPose {
            magnification: 3.3,
            ..MarkerPose::at(20.5, 20.5)
        };
        let st = render_marker(&spec(MarkerShape::Circle), &pose, 0.8, 40, 40).unwrap();
        assert!(st.pixels.len() >= 50 && st.pixels.len() <= 100, "{}", st.pixels.len());
    }

    #[test]
    fn symmetric_sphere_centroid_is_pose() {
        for mag in [1.0, 2.0, 5.5] {
            let pose = MarkerPose {
                magnification: mag,
                ..MarkerPose::at(17.0, 23.0)
            };
            let st = render_marker(&spec(MarkerShape::Sphere), &pose, 0.8, 48, 48).unwrap();
            assert_eq!(st.centroid, (17.0, 23.0));
        }
    }

    #[test]
    fn cross_is_fourfold_symmetric() {
        for mag in [1.0, 2.7, 4.0] {
            let base = MarkerPose {
                magnification: mag,
                ..MarkerPose::at(30.0, 30.0)
            };
            let rotated = MarkerPose {
                rotation: std::f64::consts::FRAC_PI_2,
                ..base
            };
            let a: BTreeSet<_> = render_marker(&spec(MarkerShape::Cross), &base, 0.8, 60, 60)
                .unwrap()
                .pixels
                .into_iter()
                .collect();
            let b: BTreeSet<_> = render_marker(&spec(MarkerShape::Cross), &rotated, 0.8, 60, 60)
                .unwrap()
                .pixels
                .into_iter()
                .collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn foreshortening_shrinks_footprint() {
        let full = MarkerPose {
            magnification: 3.0,
            ..MarkerPose::at(30.0, 30.0)
        };
        let oblique = MarkerPose {
            foreshortening: 0.4,
            ..full
        };
        let s = spec(MarkerShape::Tube);
        let a = render_marker(&s, &full, 0.8, 60, 60).unwrap().pixels.len();
        let b = render_marker(&s, &oblique, 0.8, 60, 60).unwrap().pixels.len();
        assert!(b < a);
        assert!(render_marker(&s, &MarkerPose { foreshortening: 0.0, ..full }, 0.8, 60, 60).is_err());
    }

    #[test]
    fn outside_frame_is_placement_error() {
        let r = render_marker(&spec(MarkerShape::Cross), &MarkerPose::at(-50.0, 10.0), 0.8, 32, 32);
        assert!(matches!(r, Err(Error::Placement(_))));
    }

    #[test]
    fn stamps_are_single_components() {
        for s in MarkerSpec::defaults() {
            for k in 0..12 {
                let pose = MarkerPose {
                    x: 30.0 + 0.37 * k as f64,
                    y: 31.0 - 0.21 * k as f64,
                    rotation: 0.5 * k as f64,
                    foreshortening: 0.3 + 0.05 * k as f64,
                    magnification: 2.0 + 0.3 * k as f64,
                };
                let st = render_marker(&s, &pose, 0.8, 64, 64).unwrap();
                let mut mask = vec![false; 64 * 64];
                for &(x, y) in &st.pixels {
                    mask[y * 64 + x] = true;
                }
                let comps = label_components(&mask, 64, 64, Connectivity::Four);
                assert_eq!(comps.components.len(), 1);
            }
        }
    }
}
