//! On-disk corpus format.
//!
//! A corpus directory holds `manifest.jsonl` (one JSON object per sample),
//! 16-bit grayscale image PNGs under `images/`, and 8-bit {0,255} mask PNGs
//! under `masks/`. Paths in the manifest are relative to its directory.
//! Because in-memory intensities live on the 16-bit grid, write→read is the
//! identity, bit for bit.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{AnomalyType, CaptionedSample};
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: String,
    pub mask_path: String,
    pub caption: String,
    pub category: String,
    pub anomaly_type: AnomalyType,
}

/// Write samples and return the manifest path. An empty list produces a
/// manifest with zero lines.
pub fn write_corpus(samples: &[CaptionedSample], dir: &Path) -> Result<PathBuf> {
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    for d in [dir, &images_dir, &masks_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d.display().to_string(), e))?;
    }

    let manifest_path = dir.join(MANIFEST_NAME);
    let mut manifest = fs::File::create(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;

    for sample in samples {
        sample.validate()?;
        let image_rel = format!("images/{}.png", sample.id);
        let mask_rel = format!("masks/{}.png", sample.id);
        write_image16(&sample.image, &dir.join(&image_rel))?;
        write_mask8(&sample.mask, &dir.join(&mask_rel))?;
        let record = ManifestRecord {
            id: sample.id.clone(),
            image_path: image_rel,
            mask_path: mask_rel,
            caption: sample.caption.clone(),
            category: sample.category.clone(),
            anomaly_type: sample.anomaly_type,
        };
        let line = serde_json::to_string(&record).map_err(|e| Error::Json {
            context: format!("record `{}`", sample.id),
            message: e.to_string(),
        })?;
        writeln!(manifest, "{line}")
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    }
    Ok(manifest_path)
}

/// Read a corpus directory back into memory, validating every record.
pub fn read_corpus(dir: &Path) -> Result<Vec<CaptionedSample>> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let file = fs::File::open(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let reader = BufReader::new(file);

    let mut samples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Json {
            context: format!("manifest line {}", lineno + 1),
            message: e.to_string(),
        })?;
        let image = read_image16(&dir.join(&record.image_path), &record.id)?;
        let mask = read_mask8(&dir.join(&record.mask_path), &record.id, lineno + 1)?;
        let sample = CaptionedSample {
            id: record.id,
            image,
            mask,
            caption: record.caption,
            category: record.category,
            anomaly_type: record.anomaly_type,
        };
        sample.validate()?;
        samples.push(sample);
    }
    Ok(samples)
}

fn write_image16(img: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = img.dim();
    let mut buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
    for ((i, j), v) in img.indexed_iter() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        buf.put_pixel(j as u32, i as u32, Luma([q]));
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn read_image16(path: &Path, id: &str) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        message: format!("record `{id}`: {e}"),
    })?;
    let gray = img.into_luma16();
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        gray.get_pixel(j as u32, i as u32).0[0] as f64 / 65535.0
    }))
}

fn write_mask8(mask: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let mut buf = GrayImage::new(w as u32, h as u32);
    for ((i, j), v) in mask.indexed_iter() {
        buf.put_pixel(j as u32, i as u32, Luma([if *v != 0.0 { 255 } else { 0 }]));
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Masks must be exactly {0, 255}; anything else is a schema violation.
/// Values >= 128 decode to 1.
fn read_mask8(path: &Path, id: &str, lineno: usize) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        message: format!("record `{id}`: {e}"),
    })?;
    let gray = img.into_luma8();
    let (w, h) = gray.dimensions();
    let mut out = Array2::<f64>::zeros((h as usize, w as usize));
    for i in 0..h {
        for j in 0..w {
            let v = gray.get_pixel(j, i).0[0];
            if v != 0 && v != 255 {
                return Err(Error::Schema {
                    id: id.to_string(),
                    field: "mask".into(),
                    message: format!(
                        "pixel ({i},{j}) has value {v} (expected 0 or 255); manifest line {lineno}"
                    ),
                });
            }
            out[(i as usize, j as usize)] = if v >= 128 { 1.0 } else { 0.0 };
        }
    }
    Ok(out)
}
