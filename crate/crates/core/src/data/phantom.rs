//! Procedural bone phantom: two vertical shaft segments separated by a
//! dark growth-plate gap that narrows with age and closes at 16 years.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{bin_age, save_png, split_dataset, write_manifest, SampleRecord, MAX_AGE_YEARS};
use crate::{Error, Result};

/// Maximum gap width in pixels at `S = 64`; scales linearly with `S`.
pub const DEFAULT_GAP_MAX_AT_64: f64 = 10.0;
const FUSION_AGE: f64 = 16.0;
const NOISE_STD: f64 = 0.025;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub age_years: f64,
    pub identity_seed: u64,
    pub image_size: usize,
    /// Defaults to `10 · S / 64` rounded.
    pub gap_max_px: Option<usize>,
}

impl PhantomSpec {
    pub fn new(age_years: f64, identity_seed: u64, image_size: usize) -> Self {
        Self {
            age_years,
            identity_seed,
            image_size,
            gap_max_px: None,
        }
    }

    pub fn gap_max(&self) -> usize {
        self.gap_max_px
            .unwrap_or_else(|| (DEFAULT_GAP_MAX_AT_64 * self.image_size as f64 / 64.0).round() as usize)
    }

    /// `round(gap_max · max(0, 1 - age / 16))`.
    pub fn gap_width(&self) -> usize {
        (self.gap_max() as f64 * (1.0 - self.age_years / FUSION_AGE).max(0.0)).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    /// Row-major `S×S` intensities in `[-1, 1]`.
    pub pixels: Vec<f32>,
    pub true_gap_px: usize,
    /// Pixels whose value may depend on age (epiphysis and gap rows of the
    /// shaft); everything else depends on the identity only.
    pub age_mask: Vec<bool>,
}

/// Identity-dependent geometry and texture.
struct Anatomy {
    centre: f64,
    curvature: f64,
    half_width: f64,
    gap_centre: f64,
    shaft: f64,
    background: f64,
    noise: Vec<f64>,
}

impl Anatomy {
    fn new(seed: u64, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = size as f64 / 64.0;
        let mid = size as f64 / 2.0;
        let normal = Normal::new(0.0, NOISE_STD).expect("valid normal");
        Anatomy {
            centre: mid - 0.5 + rng.gen_range(-3.0..=3.0) * f,
            curvature: rng.gen_range(-2.0..=2.0) * f,
            half_width: rng.gen_range(16.0..=22.0) * f / 2.0,
            gap_centre: (mid + rng.gen_range(-2.0..=2.0) * f).round(),
            shaft: rng.gen_range(0.68..=0.78),
            background: rng.gen_range(0.08..=0.16),
            noise: (0..size * size).map(|_| normal.sample(&mut rng)).collect(),
        }
    }

    fn in_shaft(&self, x: usize, y: usize, size: usize) -> bool {
        let t = (y as f64 - size as f64 / 2.0) / (size as f64 / 2.0);
        (x as f64 - (self.centre + self.curvature * t * t)).abs() <= self.half_width
    }
}

fn gap_rows(centre: f64, width: usize) -> (usize, usize) {
    let top = centre as usize - width / 2;
    (top, top + width)
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    let s = spec.image_size;
    if s < 16 || !(0.0..=MAX_AGE_YEARS).contains(&spec.age_years) {
        return Err(Error::Config(format!(
            "phantom needs S >= 16 and age in [0, {MAX_AGE_YEARS}], got S={s} age={}",
            spec.age_years
        )));
    }
    let a = Anatomy::new(spec.identity_seed, s);
    let gap = spec.gap_width();
    let (gap_top, gap_bottom) = gap_rows(a.gap_centre, gap);
    let (_, mask_bottom) = gap_rows(a.gap_centre, spec.gap_max());
    let epiphysis = a.shaft * (0.75 + 0.25 * spec.age_years / 20.0);
    let gap_level = a.background + 0.05;
    let mut pixels = Vec::with_capacity(s * s);
    let mut age_mask = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let shaft = a.in_shaft(x, y, s);
            let level = match (shaft, y) {
                (false, _) => a.background,
                (true, y) if y < gap_top => epiphysis,
                (true, y) if y < gap_bottom => gap_level,
                (true, _) => a.shaft,
            };
            let v = (level + a.noise[y * s + x]).clamp(0.0, 1.0);
            pixels.push((v * 2.0 - 1.0) as f32);
            age_mask.push(shaft && y < mask_bottom.max(gap_bottom));
        }
    }
    Ok(Phantom {
        pixels,
        true_gap_px: gap,
        age_mask,
    })
}

/// Gap width in pixels read from an image in `[-1, 1]`.
///
/// Row profile of the central column band; threshold halfway between the
/// lower shaft and the background columns at the image edges; longest
/// below-threshold run of rows within `[S/3, 0.8·S)`.
pub fn measure_gap_width(image: &[f32], size: usize) -> usize {
    if size < 16 || image.len() != size * size {
        return 0;
    }
    let band = (size / 32).max(1);
    let c = size / 2;
    let profile: Vec<f64> = (0..size)
        .map(|y| (c - band..c + band).map(|x| image[y * size + x] as f64).sum::<f64>() / (2 * band) as f64)
        .collect();
    let (lo, hi) = (size * 85 / 100, size * 95 / 100);
    let bright = profile[lo..hi.max(lo + 1)].iter().sum::<f64>() / (hi.max(lo + 1) - lo) as f64;
    let edge = (size / 16).max(1);
    let mut dark = 0.0;
    for y in 0..size {
        for x in (0..edge).chain(size - edge..size) {
            dark += image[y * size + x] as f64;
        }
    }
    dark /= (size * 2 * edge) as f64;
    let threshold = (bright + dark) / 2.0;
    let (mut best, mut run) = (0, 0);
    for &v in &profile[size / 3..size * 8 / 10] {
        run = if v < threshold { run + 1 } else { 0 };
        best = best.max(run);
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomDatasetSpec {
    pub n: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Number of distinct identities; `None` gives every phantom its own.
    pub identities: Option<usize>,
    pub ratios: (f64, f64, f64),
    pub dataset_tag: String,
}

impl PhantomDatasetSpec {
    pub fn new(n: usize, image_size: usize, seed: u64) -> Self {
        Self {
            n,
            image_size,
            seed,
            identities: None,
            ratios: (0.8, 0.1, 0.1),
            dataset_tag: "phantom".into(),
        }
    }
}

/// Write `images/*.png`, `manifest.csv` and `phantom_meta.csv` into `out`.
/// Ages cycle through the five 4-year bins so that classes are balanced.
pub fn emit_phantom_dataset(spec: &PhantomDatasetSpec, out: &Path) -> Result<Vec<SampleRecord>> {
    if spec.n == 0 {
        return Err(Error::Config("phantom count must be positive".into()));
    }
    let io = |p: &Path, e| Error::io(p, e);
    let images = out.join("images");
    std::fs::create_dir_all(&images).map_err(|e| io(&images, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let identity_pool: Option<Vec<u64>> = spec.identities.map(|m| (0..m.max(1)).map(|_| rng.gen()).collect());
    let mut records = Vec::with_capacity(spec.n);
    let mut meta = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let bin = i % 5;
        let age = (bin as f64 * 4.0 + rng.gen_range(0.0..4.0)).min(MAX_AGE_YEARS);
        debug_assert_eq!(bin_age(age, 5).ok(), Some(bin));
        let identity_seed = match &identity_pool {
            Some(pool) => pool[rng.gen_range(0..pool.len())],
            None => rng.gen(),
        };
        let phantom = generate_phantom(&PhantomSpec::new(age, identity_seed, spec.image_size))?;
        let rel = format!("images/phantom_{i:05}.png");
        save_png(&out.join(&rel), &phantom.pixels, spec.image_size)?;
        records.push(SampleRecord {
            image_path: rel.clone(),
            age_years: (age * 1000.0).round() / 1000.0,
            split: None,
            dataset_tag: spec.dataset_tag.clone(),
        });
        meta.push((rel, phantom.true_gap_px, identity_seed));
    }
    let indices: Vec<usize> = (0..spec.n).collect();
    let splits = split_dataset(&indices, spec.ratios, spec.seed)?;
    for (list, split) in [
        (&splits.train, super::Split::Train),
        (&splits.val, super::Split::Val),
        (&splits.test, super::Split::Test),
    ] {
        for &i in list {
            records[i].split = Some(split);
        }
    }
    write_manifest(&out.join("manifest.csv"), &records)?;
    let meta_path: PathBuf = out.join("phantom_meta.csv");
    let mut w = csv::Writer::from_path(&meta_path).map_err(|e| io(&meta_path, e.into()))?;
    let cerr = |e: csv::Error| Error::io(&meta_path, e.into());
    w.write_record(["path", "true_gap_px", "identity_seed"]).map_err(cerr)?;
    for (p, g, id) in &meta {
        w.write_record([p.clone(), g.to_string(), id.to_string()]).map_err(cerr)?;
    }
    w.flush().map_err(|e| io(&meta_path, e))?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_formula() {
        assert_eq!(PhantomSpec::new(0.0, 1, 64).gap_width(), 10);
        assert_eq!(PhantomSpec::new(8.0, 1, 64).gap_width(), 5);
        assert_eq!(PhantomSpec::new(16.0, 1, 64).gap_width(), 0);
        assert_eq!(PhantomSpec::new(19.0, 1, 64).gap_width(), 0);
        assert_eq!(PhantomSpec::new(0.0, 1, 128).gap_width(), 20);
    }

    #[test]
    fn measured_gap_matches_metadata() {
        for id in 0..30 {
            for age in [0.0, 2.5, 4.0, 8.0, 12.0, 15.0, 16.0, 19.0] {
                let p = generate_phantom(&PhantomSpec::new(age, id, 64)).unwrap();
                let m = measure_gap_width(&p.pixels, 64);
                assert!(m.abs_diff(p.true_gap_px) <= 1, "id {id} age {age}: {m} vs {}", p.true_gap_px);
            }
        }
    }

    #[test]
    fn ages_differ_only_inside_the_mask() {
        let a = generate_phantom(&PhantomSpec::new(2.0, 42, 64)).unwrap();
        let b = generate_phantom(&PhantomSpec::new(14.0, 42, 64)).unwrap();
        assert_eq!(a.age_mask, b.age_mask);
        let mut inside = 0;
        for i in 0..64 * 64 {
            if a.age_mask[i] {
                inside += (a.pixels[i] != b.pixels[i]) as usize;
            } else {
                assert!((a.pixels[i] - b.pixels[i]).abs() <= 1e-6);
            }
        }
        assert!(inside > 0);
    }

    #[test]
    fn measurement_is_monotone_in_age() {
        for id in 0..10 {
            let widths: Vec<usize> = [0.0, 4.0, 8.0, 12.0, 16.0]
                .iter()
                .map(|&a| measure_gap_width(&generate_phantom(&PhantomSpec::new(a, id, 64)).unwrap().pixels, 64))
                .collect();
            assert!(widths.windows(2).all(|w| w[0] >= w[1]), "{widths:?}");
            assert_eq!(widths[4], 0);
        }
    }
}
