use std::path::Path;

use image::imageops::{resize, FilterType};
use image::{GrayImage, ImageBuffer, Luma};

use crate::{Error, Result};

/// Read any supported image as 8-bit grayscale: `(width, height, pixels)`.
pub fn load_gray(path: &Path) -> Result<(u32, u32, Vec<u8>)> {
    let img = image::open(path).map_err(|e| Error::ingest(path, None, format!("cannot decode image: {e}")))?;
    let g = img.to_luma8();
    Ok((g.width(), g.height(), g.into_raw()))
}

/// Bilinear resize to `size×size` and map `[0, 255]` to `[-1, 1]` via
/// `v / 127.5 - 1`.
pub fn preprocess(raw: &[u8], width: u32, height: u32, size: usize) -> Result<Vec<f32>> {
    if width == 0 || height == 0 || raw.is_empty() {
        return Err(Error::ingest("<image>", None, "empty image"));
    }
    if raw.len() != (width * height) as usize {
        return Err(Error::ingest("<image>", None, format!("{} pixels for a {width}x{height} image", raw.len())));
    }
    // float buffers are resized on the unit scale
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(width, height, raw.iter().map(|&v| v as f32 / 255.0).collect()).expect("length checked");
    let resized = if width as usize == size && height as usize == size {
        buf
    } else {
        resize(&buf, size as u32, size as u32, FilterType::Triangle)
    };
    Ok(resized
        .into_raw()
        .into_iter()
        .map(|v| (v * 255.0 / 127.5 - 1.0).clamp(-1.0, 1.0))
        .collect())
}

/// `[-1, 1]` to `[0, 1]`.
pub fn to_unit_interval(v: f32) -> f32 {
    ((v + 1.0) * 0.5).clamp(0.0, 1.0)
}

/// Save an `S×S` image in `[-1, 1]` as an 8-bit PNG.
pub fn save_png(path: &Path, pixels: &[f32], size: usize) -> Result<()> {
    let bytes: Vec<u8> = pixels.iter().map(|&v| (to_unit_interval(v) * 255.0).round() as u8).collect();
    let img = GrayImage::from_raw(size as u32, size as u32, bytes)
        .ok_or_else(|| Error::Dimension(format!("{} pixels for a {size}x{size} image", pixels.len())))?;
    img.save(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })
}
