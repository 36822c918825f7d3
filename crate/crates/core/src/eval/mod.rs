//! Fréchet distance, age-invariant reconstruction and age shifting,
//! t-SNE, and the ablation report.

mod ablation;
mod fid;
mod plot;
mod tsne;

pub use crate::data::measure_gap_width;
pub use ablation::{ablation_report, reconstruction_fid, AblationEntry, AblationReport};
pub use fid::{extract_features, frechet_distance, Extractor, FeatureStats, DESK_GRID};
pub use plot::{read_tsne_csv, render_tsne_png, write_tsne_csv, TsnePoint};
pub use tsne::{affinities, tsne_embed, Affinities, Embedding2D, TsneConfig};

use crate::model::{encode, generate, ModelParams};
use crate::objectives::one_hot;
use crate::{Error, Result, Tensor};

/// Images per forward pass during evaluation.
pub const EVAL_BATCH: usize = 32;

/// `G(E(x), one_hot(bins))` over any number of images, in chunks.
pub fn generate_at_bins(params: &ModelParams<f32>, images: &[Vec<f32>], bins: &[usize]) -> Result<Vec<Vec<f32>>> {
    let s = params.config.image_size;
    if images.len() != bins.len() {
        return Err(Error::Dimension(format!("{} images but {} bins", images.len(), bins.len())));
    }
    let mut out = Vec::with_capacity(images.len());
    for (chunk, b) in images.chunks(EVAL_BATCH).zip(bins.chunks(EVAL_BATCH)) {
        let mut data = Vec::with_capacity(chunk.len() * s * s);
        for img in chunk {
            data.extend_from_slice(img);
        }
        let x = Tensor::new(vec![chunk.len(), 1, s, s], data)?;
        let z = encode(params, &x)?;
        let y = generate(params, &z, &one_hot(b, params.config.age_bins)?)?;
        out.extend(y.data().chunks(s * s).map(|c| c.to_vec()));
    }
    Ok(out)
}

/// `x' = G(E(x), l)` with each subject's own bin.
pub fn age_invariant_reconstruct(params: &ModelParams<f32>, images: &[Vec<f32>], bins: &[usize]) -> Result<Vec<Vec<f32>>> {
    generate_at_bins(params, images, bins)
}

/// Bin reached by shifting `source_bin` by `delta_years`. The shift must
/// be a whole number of bins and stay inside `[0, K)`.
pub fn target_bin(source_bin: usize, delta_years: i32, k: usize) -> Result<usize> {
    let width = 20.0 / k as f64;
    let shift = delta_years as f64 / width;
    if shift.fract() != 0.0 {
        return Err(Error::Range(format!("{delta_years} years is not a whole number of {width}-year bins")));
    }
    let target = source_bin as i64 + shift as i64;
    if target < 0 || target >= k as i64 || source_bin >= k {
        return Err(Error::Range(format!(
            "bin {source_bin} shifted by {delta_years} years leaves [0, {k})"
        )));
    }
    Ok(target as usize)
}

/// Progress (positive `delta_years`) or regress each image to its shifted
/// bin with a one-hot label.
pub fn progress_image(
    params: &ModelParams<f32>,
    images: &[Vec<f32>],
    source_bins: &[usize],
    delta_years: i32,
) -> Result<Vec<Vec<f32>>> {
    let k = params.config.age_bins;
    let targets = source_bins
        .iter()
        .map(|&b| target_bin(b, delta_years, k))
        .collect::<Result<Vec<_>>>()?;
    generate_at_bins(params, images, &targets)
}

/// Images with every pixel uniform in `[-1, 1]`.
pub fn uniform_noise_images(n: usize, size: usize, seed: u64) -> Vec<Vec<f32>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..size * size).map(|_| rng.gen_range(-1.0f32..=1.0)).collect()).collect()
}

/// Fréchet distance between the features of two image sets.
pub fn image_fid(a: &[Vec<f32>], b: &[Vec<f32>], size: usize, extractor: &Extractor) -> Result<f64> {
    let fa = FeatureStats::from_features(&extract_features(a, size, extractor)?)?;
    let fb = FeatureStats::from_features(&extract_features(b, size, extractor)?)?;
    frechet_distance(&fa, &fb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_years_is_two_bins() {
        assert_eq!(target_bin(1, 8, 5).unwrap(), 3);
        assert_eq!(target_bin(2, -8, 5).unwrap(), 0);
        assert!(matches!(target_bin(4, 8, 5), Err(Error::Range(_))));
        assert!(matches!(target_bin(1, -8, 5), Err(Error::Range(_))));
        assert!(matches!(target_bin(1, 6, 5), Err(Error::Range(_))));
    }
}
