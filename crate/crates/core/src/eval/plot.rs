//! t-SNE point files and scatter rendering.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsnePoint {
    pub index: usize,
    pub age_bin: usize,
    /// `real`, `caae` or `bapgan`.
    pub source: String,
    pub x: f64,
    pub y: f64,
}

pub fn write_tsne_csv(path: &Path, points: &[TsnePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for p in points {
        w.serialize(p).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tsne_csv(path: &Path) -> Result<Vec<TsnePoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::ingest(path, None, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e: csv::Error| Error::ingest(path, e.position().map(|p| p.line() as usize), e.to_string())))
        .collect()
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

/// Scatter plot: colour by age bin, marker by source (filled square for
/// real images, cross for CAAE, hollow square for BAPGAN).
pub fn render_tsne_png(path: &Path, points: &[TsnePoint], side: u32) -> Result<()> {
    let mut img = RgbImage::from_pixel(side, side, Rgb([255, 255, 255]));
    if !points.is_empty() {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in points {
            x0 = x0.min(p.x);
            x1 = x1.max(p.x);
            y0 = y0.min(p.y);
            y1 = y1.max(p.y);
        }
        let margin = 12.0;
        let span = (side as f64 - 2.0 * margin).max(1.0);
        let sx = span / (x1 - x0).max(1e-12);
        let sy = span / (y1 - y0).max(1e-12);
        for p in points {
            let cx = (margin + (p.x - x0) * sx) as i64;
            let cy = (margin + (y1 - p.y) * sy) as i64;
            let colour = Rgb(PALETTE[p.age_bin % PALETTE.len()]);
            for d in -3i64..=3 {
                for e in -3i64..=3 {
                    let on = match p.source.as_str() {
                        "real" => true,
                        "caae" => d == e || d == -e,
                        _ => d.abs() == 3 || e.abs() == 3,
                    };
                    let (px, py) = (cx + d, cy + e);
                    if on && px >= 0 && py >= 0 && px < side as i64 && py < side as i64 {
                        img.put_pixel(px as u32, py as u32, colour);
                    }
                }
            }
        }
    }
    img.save(path).map_err(|e| Error::io(path, std::io::Error::other(e)))
}
