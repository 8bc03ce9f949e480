use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    /// Flat pixel indices (`y * width + x`), ascending.
    pub pixels: Vec<usize>,
    /// Mean pixel-centre coordinates `(x, y)`.
    pub centroid: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Components {
    /// In order of their first pixel in row-major scan.
    pub components: Vec<Component>,
}

impl Components {
    /// Index of the largest component; equal sizes go to the component whose
    /// centroid comes first in row-major order (smaller y, then smaller x).
    pub fn largest(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, c) in self.components.iter().enumerate() {
            best = match best {
                None => Some(i),
                Some(b) => {
                    let cb = &self.components[b];
                    let better = c.pixels.len() > cb.pixels.len()
                        || (c.pixels.len() == cb.pixels.len()
                            && (c.centroid.1, c.centroid.0) < (cb.centroid.1, cb.centroid.0));
                    Some(if better { i } else { b })
                }
            };
        }
        best
    }
}

/// Breadth-first labeling of the `true` pixels of a row-major mask.
pub fn label_components(
    mask: &[bool],
    width: usize,
    height: usize,
    connectivity: Connectivity,
) -> Components {
    assert_eq!(mask.len(), width * height, "mask size");
    let mut seen = vec![false; mask.len()];
    let mut components = Vec::new();
    let mut queue = VecDeque::new();
    let offsets: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
        Connectivity::Eight => &[
            (1, 0),
            (-1, 0),
            (0, 1),
            (0, -1),
            (1, 1),
            (1, -1),
            (-1, 1),
            (-1, -1),
        ],
    };
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            let (x, y) = ((p % width) as isize, (p / width) as isize);
            for &(dx, dy) in offsets {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                    continue;
                }
                let q = ny as usize * width + nx as usize;
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
        pixels.sort_unstable();
        let n = pixels.len() as f64;
        let cx = pixels.iter().map(|&p| (p % width) as f64).sum::<f64>() / n;
        let cy = pixels.iter().map(|&p| (p / width) as f64).sum::<f64>() / n;
        components.push(Component {
            pixels,
            centroid: (cx, cy),
        });
    }
    Components { components }
}
