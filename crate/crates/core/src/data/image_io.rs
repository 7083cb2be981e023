//! Image ingestion and export.
//!
//! [`load_image_directory`] turns a two-class directory tree
//! (`<root>/Normal/*.{png,jpg,jpeg,pgm}`, `<root>/Pneumonia/...`) into a
//! [`Dataset`]: each file is decoded, converted to grayscale with the
//! ITU-R BT.601 luma weights (0.299, 0.587, 0.114), resized to the target
//! square with bilinear interpolation, and scaled to `[0, 1]`. Files are
//! visited in lexicographic order so re-ingesting a directory reproduces the
//! same dataset byte for byte. Undecodable files are skipped and tallied
//! rather than aborting the run; grayscale and resampling are implemented
//! here (not delegated to decoder defaults) so the pixel pipeline is pinned.

use std::path::{Path, PathBuf};

use crate::data::{Dataset, ImageRecord, Provenance};
use crate::error::{Error, Result};

/// File extensions the loader attempts to decode; everything else is
/// silently ignored (editor droppings, manifests, ...).
const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "pgm"];

/// The two class subdirectories, in label order.
const CLASS_DIRS: [&str; 2] = ["Normal", "Pneumonia"];

/// One skipped file: which, and why.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestWarning {
    pub path: PathBuf,
    pub reason: String,
}

/// A loaded dataset plus the tally of files that failed to decode.
#[derive(Debug, Clone, PartialEq)]
pub struct Ingest {
    pub dataset: Dataset,
    pub skipped: Vec<IngestWarning>,
}

/// Loads `<root>/Normal` and `<root>/Pneumonia` into a dataset of
/// `target_size × target_size` grayscale records with labels 0 and 1.
pub fn load_image_directory(root: &Path, target_size: usize) -> Result<Ingest> {
    if target_size < 1 {
        return Err(Error::InvalidHyperparameter("target size must be ≥ 1".into()));
    }
    let mut dataset = Dataset::new(target_size);
    let mut skipped = Vec::new();
    for (label, class) in CLASS_DIRS.iter().enumerate() {
        let dir = root.join(class);
        if !dir.is_dir() {
            return Err(Error::MissingClassDir { dir });
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(&dir, e))?
            .into_iter()
            .map(|entry| entry.path())
            .filter(|p| p.is_file() && has_image_extension(p))
            .collect();
        files.sort();
        for path in files {
            let pixels = match decode_to_gray(&path, target_size) {
                Ok(pixels) => pixels,
                Err(reason) => {
                    skipped.push(IngestWarning { path, reason });
                    continue;
                }
            };
            let name = path.file_name().expect("read_dir yields named files").to_string_lossy();
            let id = format!("{class}/{name}");
            dataset.records.push(ImageRecord::new(
                id,
                pixels,
                label as u8,
                Provenance::Real,
                target_size,
            )?);
        }
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("no decodable images under the class directories"));
    }
    Ok(Ingest { dataset, skipped })
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Decodes one file to grayscale `[0, 1]` pixels at `target × target`.
/// Returns the failure reason as text so callers can tally and continue.
fn decode_to_gray(path: &Path, target: usize) -> std::result::Result<Vec<f32>, String> {
    let img = image::open(path).map_err(|e| e.to_string())?;
    let rgb = img.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut gray = Vec::with_capacity(w * h);
    for px in rgb.pixels() {
        gray.push(luma(px.0[0], px.0[1], px.0[2]));
    }
    let resized = resize_bilinear(&gray, w, h, target, target);
    Ok(resized.into_iter().map(|p| p.clamp(0.0, 1.0)).collect())
}

/// BT.601 luma. For already-gray sources all three channels are equal and
/// the weights (which sum to 1) leave the value unchanged.
pub(crate) fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Center-aligned bilinear resampling: target pixel centers map to source
/// coordinates, clamped at the borders, and blend the four neighbors.
pub(crate) fn resize_bilinear(
    src: &[f32],
    src_w: usize,
    src_h: usize,
    dst_w: usize,
    dst_h: usize,
) -> Vec<f32> {
    debug_assert_eq!(src.len(), src_w * src_h);
    let mut dst = Vec::with_capacity(dst_w * dst_h);
    let scale_x = src_w as f32 / dst_w as f32;
    let scale_y = src_h as f32 / dst_h as f32;
    for ty in 0..dst_h {
        let sy = ((ty as f32 + 0.5) * scale_y - 0.5).clamp(0.0, (src_h - 1) as f32);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let fy = sy - y0 as f32;
        for tx in 0..dst_w {
            let sx = ((tx as f32 + 0.5) * scale_x - 0.5).clamp(0.0, (src_w - 1) as f32);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let fx = sx - x0 as f32;
            let top = src[y0 * src_w + x0] * (1.0 - fx) + src[y0 * src_w + x1] * fx;
            let bottom = src[y1 * src_w + x0] * (1.0 - fx) + src[y1 * src_w + x1] * fx;
            dst.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    dst
}

/// Writes `[0, 1]` grayscale pixels as an 8-bit PNG.
pub fn save_grayscale_png(path: &Path, pixels: &[f32], size: usize) -> Result<()> {
    if pixels.len() != size * size {
        return Err(Error::LengthMismatch { left: pixels.len(), right: size * size });
    }
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(size as u32, size as u32, bytes)
        .expect("length checked above");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Io { path: path.to_path_buf(), detail: e.to_string() })
}
