use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};

use super::types::{ClassTable, DatasetIndex, Image, LabelMask, Split};

/// Writes a mask as an 8-bit single-channel PNG; pixel value = class id, 255 = ignore.
pub fn write_mask_png(mask: &LabelMask, path: &Path) -> Result<()> {
    let img = GrayImage::from_raw(mask.width as u32, mask.height as u32, mask.data.clone())
        .ok_or_else(|| Error::Shape(format!("mask buffer does not match {}x{}", mask.height, mask.width)))?;
    img.save(path).map_err(|e| Error::image(path, e))
}

pub fn read_mask_png(path: &Path) -> Result<LabelMask> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let gray = img.into_luma8();
    Ok(LabelMask {
        height: gray.height() as usize,
        width: gray.width() as usize,
        data: gray.into_raw(),
    })
}

/// Writes a float image as 8-bit RGB (values clamped to [0, 1] then quantized).
pub fn write_image_png(image: &Image, path: &Path) -> Result<()> {
    if image.channels != 3 {
        return Err(Error::Shape(format!(
            "png export expects 3 channels, image has {}",
            image.channels
        )));
    }
    let (h, w) = (image.height, image.width);
    let mut raw = vec![0u8; h * w * 3];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                raw[(r * w + c) * 3 + ch] =
                    (image.get(r, c, ch).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("sized buffer");
    img.save(path).map_err(|e| Error::image(path, e))
}

pub fn read_image_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let rgb = img.into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.into_raw();
    let mut out = Image::zeros(h, w, 3);
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                out.set(r, c, ch, raw[(r * w + c) * 3 + ch] as f64 / 255.0);
            }
        }
    }
    Ok(out)
}

/// Indexes `<root>/<split>/images/<stem>.png` against `<root>/<split>/masks/<stem>.png`.
///
/// Pairs come back sorted lexicographically by stem. Any stem present on only
/// one side is an error listing every unmatched stem.
pub fn load_dataset(root: &Path, split: Split, _table: &ClassTable) -> Result<DatasetIndex> {
    let img_dir = root.join(split.as_str()).join("images");
    let mask_dir = root.join(split.as_str()).join("masks");
    let images = list_png_stems(&img_dir)?;
    let masks = list_png_stems(&mask_dir)?;

    let mut missing_masks = Vec::new();
    let mut missing_images = Vec::new();
    for stem in images.keys() {
        if !masks.contains_key(stem) {
            missing_masks.push(stem.clone());
        }
    }
    for stem in masks.keys() {
        if !images.contains_key(stem) {
            missing_images.push(stem.clone());
        }
    }
    if !missing_masks.is_empty() || !missing_images.is_empty() {
        return Err(Error::Validation(format!(
            "unmatched stems in {}: images without masks {:?}, masks without images {:?}",
            root.join(split.as_str()).display(),
            missing_masks,
            missing_images
        )));
    }

    let pairs = images
        .into_iter()
        .map(|(stem, img_path)| {
            let mask_path = masks[&stem].clone();
            (img_path, mask_path)
        })
        .collect();
    Ok(DatasetIndex { split, pairs })
}

fn list_png_stems(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|s| s.to_str()) != Some("png") {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}
