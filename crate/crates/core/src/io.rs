//! Single-channel PNG reading and writing.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::types::{GrayImage, LabelMap, NormalizedImage};

fn img_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| img_err(path, e))
}

/// Reads an 8- or 16-bit grayscale PNG as raw intensities.
pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let (w, h, px): (u32, u32, Vec<f32>) = match open(path)? {
        DynamicImage::ImageLuma8(b) => (b.width(), b.height(), b.pixels().map(|p| p.0[0] as f32).collect()),
        DynamicImage::ImageLuma16(b) => (b.width(), b.height(), b.pixels().map(|p| p.0[0] as f32).collect()),
        other => {
            return Err(Error::InvalidInput(format!(
                "{}: expected a single-channel image, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    GrayImage::new(w as usize, h as usize, px)
}

/// Writes raw intensities as a 16-bit PNG (rounded, clamped to `0..=65535`).
pub fn write_gray16(path: &Path, img: &GrayImage) -> Result<()> {
    let data: Vec<u16> = img
        .pixels()
        .iter()
        .map(|v| v.round().clamp(0.0, 65535.0) as u16)
        .collect();
    save16(path, img.width(), img.height(), data)
}

fn save16(path: &Path, w: usize, h: usize, data: Vec<u16>) -> Result<()> {
    ensure_parent(path)?;
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, data).expect("buffer size matches");
    buf.save(path).map_err(|e| img_err(path, e))
}

/// Normalized image stored as `round(v * 65535)`.
pub fn write_normalized16(path: &Path, img: &NormalizedImage) -> Result<()> {
    let data = img
        .pixels()
        .iter()
        .map(|v| (v * 65535.0).round().clamp(0.0, 65535.0) as u16)
        .collect();
    save16(path, img.width(), img.height(), data)
}

pub fn read_normalized16(path: &Path) -> Result<NormalizedImage> {
    match open(path)? {
        DynamicImage::ImageLuma16(b) => NormalizedImage::new(
            b.width() as usize,
            b.height() as usize,
            b.pixels().map(|p| p.0[0] as f32 / 65535.0).collect(),
        ),
        other => Err(Error::InvalidInput(format!(
            "{}: expected a 16-bit single-channel image, got {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    ensure_parent(path)?;
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(
        labels.width() as u32,
        labels.height() as u32,
        labels.ids().to_vec(),
    )
    .expect("buffer size matches");
    buf.save(path).map_err(|e| img_err(path, e))
}

/// Reads an 8-bit label PNG; values must be below `num_classes`.
pub fn read_labels(path: &Path, num_classes: usize) -> Result<LabelMap> {
    match open(path)? {
        DynamicImage::ImageLuma8(b) => {
            let (w, h) = (b.width() as usize, b.height() as usize);
            LabelMap::new(w, h, num_classes, b.into_raw()).map_err(|e| match e {
                Error::InvalidLabel(m) => Error::InvalidLabel(format!("{}: {m}", path.display())),
                other => other,
            })
        }
        other => Err(Error::InvalidInput(format!(
            "{}: label maps must be 8-bit single-channel, got {:?}",
            path.display(),
            other.color()
        ))),
    }
}
