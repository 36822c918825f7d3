//! Small-angle rotation followed by two randomly chosen intensity
//! operations. Operations act on the `[0, 255]` intensity scale with the
//! usual image-library semantics (blend against a degenerate image).

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentOp {
    AutoContrast,
    Contrast,
    Brightness,
    Sharpness,
    Posterize,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 5] = [
        AugmentOp::AutoContrast,
        AugmentOp::Contrast,
        AugmentOp::Brightness,
        AugmentOp::Sharpness,
        AugmentOp::Posterize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentOp::AutoContrast => "auto-contrast",
            AugmentOp::Contrast => "contrast",
            AugmentOp::Brightness => "brightness",
            AugmentOp::Sharpness => "sharpness",
            AugmentOp::Posterize => "posterize",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|op| op.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown augmentation op {name:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Rotation angle is uniform in `[-max_rotation_deg, max_rotation_deg]`.
    pub max_rotation_deg: f64,
    pub ops: Vec<AugmentOp>,
    pub ops_per_image: usize,
    /// Enhancement factor range for contrast, brightness and sharpness.
    pub factor_range: (f64, f64),
    /// Inclusive range of bits kept by posterize.
    pub posterize_bits: (u8, u8),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 5.0,
            ops: AugmentOp::ALL.to_vec(),
            ops_per_image: 2,
            factor_range: (0.7, 1.3),
            posterize_bits: (4, 7),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ops_per_image > self.ops.len() {
            return Err(Error::Config(format!(
                "{} ops per image from a pool of {}",
                self.ops_per_image,
                self.ops.len()
            )));
        }
        let (lo, hi) = self.factor_range;
        if !(lo > 0.0 && lo <= hi) || !(1..=8).contains(&self.posterize_bits.0) || self.posterize_bits.0 > self.posterize_bits.1 || self.posterize_bits.1 > 8 {
            return Err(Error::Config("invalid augmentation magnitudes".into()));
        }
        Ok(())
    }
}

/// Per-sample seed: a function of the run seed, epoch and sample index
/// only, so results do not depend on loading order.
pub fn augment_seed(global: u64, epoch: u64, index: u64) -> [u8; 32] {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&global.to_le_bytes());
    seed[8..16].copy_from_slice(&epoch.to_le_bytes());
    seed[16..24].copy_from_slice(&index.to_le_bytes());
    seed[24..].copy_from_slice(b"augment\0");
    seed
}

/// Rotate about the image centre with bilinear sampling; pixels from
/// outside the frame read as black.
pub fn rotate(image: &[f32], size: usize, degrees: f64) -> Vec<f32> {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let c = (size as f64 - 1.0) / 2.0;
    let at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= size as isize || y >= size as isize {
            0.0
        } else {
            image[y as usize * size + x as usize] as f64
        }
    };
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            let sx = cos * dx + sin * dy + c;
            let sy = -sin * dx + cos * dy + c;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = if fx == 0.0 && fy == 0.0 {
                at(x0, y0)
            } else {
                at(x0, y0) * (1.0 - fx) * (1.0 - fy)
                    + at(x0 + 1, y0) * fx * (1.0 - fy)
                    + at(x0, y0 + 1) * (1.0 - fx) * fy
                    + at(x0 + 1, y0 + 1) * fx * fy
            };
            out[y * size + x] = v as f32;
        }
    }
    out
}

fn blend(degenerate: &[f32], image: &[f32], factor: f32) -> Vec<f32> {
    if factor == 1.0 {
        return image.to_vec();
    }
    degenerate
        .iter()
        .zip(image)
        .map(|(&d, &v)| (d * (1.0 - factor) + v * factor).clamp(0.0, 255.0))
        .collect()
}

fn smooth(image: &[f32], size: usize) -> Vec<f32> {
    let mut out = image.to_vec();
    for y in 1..size.saturating_sub(1) {
        for x in 1..size - 1 {
            let mut acc = 0.0;
            for dy in 0..3 {
                for dx in 0..3 {
                    let w = if dx == 1 && dy == 1 { 5.0 } else { 1.0 };
                    acc += w * image[(y + dy - 1) * size + x + dx - 1];
                }
            }
            out[y * size + x] = acc / 13.0;
        }
    }
    out
}

/// One intensity operation on a `[0, 255]` image. `magnitude` is the
/// enhancement factor, or the number of kept bits for posterize; it is
/// ignored by auto-contrast.
pub fn apply_op(image: &[f32], size: usize, op: AugmentOp, magnitude: f64) -> Vec<f32> {
    let f = magnitude as f32;
    match op {
        AugmentOp::AutoContrast => {
            let lo = image.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = image.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            if hi - lo <= f32::EPSILON {
                return image.to_vec();
            }
            let scale = 255.0 / (hi - lo);
            image.iter().map(|&v| (v - lo) * scale).collect()
        }
        AugmentOp::Contrast => {
            let mean = image.iter().map(|&v| v as f64).sum::<f64>() / image.len() as f64;
            blend(&vec![mean as f32; image.len()], image, f)
        }
        AugmentOp::Brightness => blend(&vec![0.0; image.len()], image, f),
        AugmentOp::Sharpness => blend(&smooth(image, size), image, f),
        AugmentOp::Posterize => {
            let bits = (magnitude as u32).clamp(1, 8);
            let mask = !((1u32 << (8 - bits)) - 1) as u8;
            image.iter().map(|&v| (v.round().clamp(0.0, 255.0) as u8 & mask) as f32).collect()
        }
    }
}

/// Augment one `[-1, 1]` image deterministically from `seed`.
pub fn augment(image: &[f32], size: usize, seed: [u8; 32], config: &AugmentConfig) -> Vec<f32> {
    let mut rng = ChaCha8Rng::from_seed(seed);
    let angle = if config.max_rotation_deg > 0.0 {
        rng.gen_range(-config.max_rotation_deg..=config.max_rotation_deg)
    } else {
        0.0
    };
    let mut img: Vec<f32> = image.iter().map(|&v| (v + 1.0) * 127.5).collect();
    if angle != 0.0 {
        img = rotate(&img, size, angle);
    }
    let chosen = sample(&mut rng, config.ops.len(), config.ops_per_image.min(config.ops.len()));
    for i in chosen.iter() {
        let op = config.ops[i];
        let magnitude = match op {
            AugmentOp::Posterize => rng.gen_range(config.posterize_bits.0..=config.posterize_bits.1) as f64,
            AugmentOp::AutoContrast => 0.0,
            _ => rng.gen_range(config.factor_range.0..=config.factor_range.1),
        };
        img = apply_op(&img, size, op, magnitude);
    }
    img.into_iter().map(|v| (v / 127.5 - 1.0).clamp(-1.0, 1.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(size: usize) -> Vec<f32> {
        (0..size * size).map(|i| ((i % 97) as f32 / 48.0) - 1.0).collect()
    }

    #[test]
    fn deterministic_per_seed() {
        let img = ramp(16);
        let c = AugmentConfig::default();
        let a = augment(&img, 16, augment_seed(1, 2, 3), &c);
        assert_eq!(a, augment(&img, 16, augment_seed(1, 2, 3), &c));
        assert_ne!(a, augment(&img, 16, augment_seed(1, 2, 4), &c));
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn op_pool_is_closed() {
        for op in AugmentOp::ALL {
            assert_eq!(AugmentOp::from_name(op.name()).unwrap(), op);
        }
        assert!(matches!(AugmentOp::from_name("solarize"), Err(Error::Config(_))));
    }

    #[test]
    fn identity_magnitudes_leave_image_unchanged() {
        let img: Vec<f32> = ramp(16).iter().map(|v| (v + 1.0) * 127.5).collect();
        let mut out = rotate(&img, 16, 0.0);
        for op in [AugmentOp::Contrast, AugmentOp::Brightness, AugmentOp::Sharpness] {
            out = apply_op(&out, 16, op, 1.0);
        }
        let diff = img.iter().zip(&out).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff < 1e-6);
    }

    #[test]
    fn posterize_keeps_top_bits() {
        let out = apply_op(&[255.0, 17.0, 128.0], 1, AugmentOp::Posterize, 4.0);
        assert_eq!(out, vec![240.0, 16.0, 128.0]);
    }
}
