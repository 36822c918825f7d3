//! Dataset ingestion, age binning, preprocessing, augmentation, splits and
//! the procedural bone phantom.

mod augment;
mod image;
mod manifest;
mod phantom;

pub use augment::{augment, augment_seed, apply_op, rotate, AugmentConfig, AugmentOp};
pub use image::{load_gray, preprocess, save_png, to_unit_interval};
pub use manifest::{load_manifest, write_manifest, Manifest, SampleRecord, Split};
pub use phantom::{
    emit_phantom_dataset, generate_phantom, measure_gap_width, Phantom, PhantomDatasetSpec, PhantomSpec,
    DEFAULT_GAP_MAX_AT_64,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Oldest representable age; the last bin is `[16, 19]` inclusive of
/// fractional years below 20.
pub const MAX_AGE_YEARS: f64 = 19.999;

/// Age-interval index. With `K = 5` the bins are `[0-3]`, `[4-7]`,
/// `[8-11]`, `[12-15]` and `[16-19]`; other `K` split `[0, 20)` evenly.
pub fn bin_age(age_years: f64, k: usize) -> Result<usize> {
    if !age_years.is_finite() || !(0.0..=MAX_AGE_YEARS).contains(&age_years) {
        return Err(Error::Range(format!("age {age_years} outside [0, {MAX_AGE_YEARS}]")));
    }
    if k == 0 {
        return Err(Error::Config("need at least one age bin".into()));
    }
    let width = 20.0 / k as f64;
    Ok(((age_years / width).floor() as usize).min(k - 1))
}

/// Centre of a bin in years.
pub fn bin_midpoint(bin: usize, k: usize) -> f64 {
    let width = 20.0 / k as f64;
    (bin as f64 + 0.5) * width
}

/// Three disjoint parts of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle into train/val/test. Train and validation sizes are the
/// rounded ratio shares, the test split takes the remainder.
pub fn split_dataset<T: Clone>(records: &[T], ratios: (f64, f64, f64), seed: u64) -> Result<Splits<T>> {
    if records.is_empty() {
        return Err(Error::Config("cannot split an empty dataset".into()));
    }
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || (a + b + c - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let n = records.len();
    let n_train = ((n as f64 * a).round() as usize).min(n);
    let n_val = ((n as f64 * b).round() as usize).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |ix: &[usize]| ix.iter().map(|&i| records[i].clone()).collect();
    Ok(Splits {
        train: pick(&order[..n_train]),
        val: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
    })
}

/// Preprocessed images of one split held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    /// Row-major `S×S` images in `[-1, 1]`.
    pub images: Vec<Vec<f32>>,
    pub bins: Vec<usize>,
    pub ages: Vec<f64>,
    pub paths: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Load and preprocess every record.
    pub fn load(manifest: &Manifest, records: &[SampleRecord], image_size: usize, k: usize) -> Result<Self> {
        let mut ds = Dataset {
            image_size,
            images: Vec::with_capacity(records.len()),
            bins: Vec::with_capacity(records.len()),
            ages: Vec::with_capacity(records.len()),
            paths: Vec::with_capacity(records.len()),
        };
        for r in records {
            let path = manifest.resolve(&r.image_path);
            let (w, h, raw) = load_gray(&path)?;
            ds.images.push(preprocess(&raw, w, h, image_size).map_err(|e| match e {
                Error::Ingestion { message, .. } => Error::ingest(&path, None, message),
                other => other,
            })?);
            ds.bins.push(bin_age(r.age_years, k)?);
            ds.ages.push(r.age_years);
            ds.paths.push(r.image_path.clone());
        }
        Ok(ds)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            image_size: self.image_size,
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            bins: indices.iter().map(|&i| self.bins[i]).collect(),
            ages: indices.iter().map(|&i| self.ages[i]).collect(),
            paths: indices.iter().map(|&i| self.paths[i].clone()).collect(),
        }
    }

    /// Indices whose bin equals `bin`.
    pub fn indices_in_bin(&self, bin: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.bins[i] == bin).collect()
    }

    /// Stack the given images into a `[B, 1, S, S]` tensor.
    pub fn batch(&self, indices: &[usize]) -> crate::Tensor<f32> {
        let s = self.image_size;
        let mut data = Vec::with_capacity(indices.len() * s * s);
        for &i in indices {
            data.extend_from_slice(&self.images[i]);
        }
        crate::Tensor::new(vec![indices.len(), 1, s, s], data).expect("consistent image sizes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_follow_four_year_intervals() {
        assert_eq!(bin_age(5.0, 5).unwrap(), 1);
        assert_eq!(bin_age(0.0, 5).unwrap(), 0);
        assert_eq!(bin_age(19.0, 5).unwrap(), 4);
        assert_eq!(bin_age(19.999, 5).unwrap(), 4);
        for (age, bin) in [(3.0, 0), (4.0, 1), (7.9, 1), (8.0, 2), (11.5, 2), (12.0, 3), (16.0, 4)] {
            assert_eq!(bin_age(age, 5).unwrap(), bin, "{age}");
        }
        assert!(matches!(bin_age(20.0, 5), Err(Error::Range(_))));
        assert!(matches!(bin_age(-0.5, 5), Err(Error::Range(_))));
        assert!(matches!(bin_age(f64::NAN, 5), Err(Error::Range(_))));
    }

    #[test]
    fn midpoints_round_trip() {
        for k in [3, 5, 6] {
            for b in 0..k {
                assert_eq!(bin_age(bin_midpoint(b, k), k).unwrap(), b);
            }
        }
    }

    #[test]
    fn split_sizes() {
        let recs: Vec<usize> = (0..317).collect();
        let s = split_dataset(&recs, (0.704, 0.101, 0.195), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (223, 32, 62));
        let ten: Vec<usize> = (0..10).collect();
        let s = split_dataset(&ten, (0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
    }

    #[test]
    fn split_is_a_seeded_partition() {
        let recs: Vec<usize> = (0..100).collect();
        let a = split_dataset(&recs, (0.7, 0.1, 0.2), 3).unwrap();
        assert_eq!(a, split_dataset(&recs, (0.7, 0.1, 0.2), 3).unwrap());
        assert_ne!(a, split_dataset(&recs, (0.7, 0.1, 0.2), 4).unwrap());
        let mut all: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort();
        assert_eq!(all, recs);
    }

    #[test]
    fn split_rejects_bad_input() {
        assert!(matches!(split_dataset::<u8>(&[], (0.8, 0.1, 0.1), 0), Err(Error::Config(_))));
        assert!(matches!(split_dataset(&[1, 2], (0.8, 0.1, 0.2), 0), Err(Error::Config(_))));
    }
}
