//! Building the trial sequence of a new session.

use std::path::PathBuf;

use bapgan_core::data::{load_manifest, Dataset, Split};
use bapgan_core::eval::generate_at_bins;
use bapgan_core::model::ModelParams;
use bapgan_core::trainer::load_model;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Truth, VttError, VttSessionSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct HeldOutImage {
    /// Row-major `S×S` in `[-1, 1]`.
    pub pixels: Vec<f32>,
    pub bin: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedTrial {
    pub truth: Truth,
    pub pixels: Vec<f32>,
    /// Side length `S`.
    pub size: usize,
}

pub trait Synthesizer {
    fn age_bins(&self) -> usize;
    /// `G(E(x), one_hot(target))` for every image.
    fn generate(&self, images: &[Vec<f32>], target_bins: &[usize]) -> Result<Vec<Vec<f32>>, VttError>;
}

pub struct ModelSynthesizer {
    pub params: ModelParams<f32>,
}

impl Synthesizer for ModelSynthesizer {
    fn age_bins(&self) -> usize {
        self.params.config.age_bins
    }

    fn generate(&self, images: &[Vec<f32>], target_bins: &[usize]) -> Result<Vec<Vec<f32>>, VttError> {
        Ok(generate_at_bins(&self.params, images, target_bins)?)
    }
}

/// Seeded trial order: held-out images are shuffled, synthetic sources are
/// drawn first (from images whose shifted bin exists), real trials from the
/// rest, so no real image appears next to its own synthetic version. The
/// interleaved pool is then shuffled again.
pub fn plan_trials(
    spec: &VttSessionSpec,
    pool: &[HeldOutImage],
    synth: &dyn Synthesizer,
) -> Result<Vec<PlannedTrial>, VttError> {
    spec.validate()?;
    let (n_real, n_synth) = spec.counts();
    let k = synth.age_bins() as i64;
    let shift = spec.kind.bin_shift();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.shuffle_seed);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng);

    let eligible = |i: &usize| (0..k).contains(&(pool[*i].bin as i64 + shift));
    let sources: Vec<usize> = order.iter().copied().filter(eligible).take(n_synth).collect();
    let reals: Vec<usize> = order.iter().copied().filter(|i| !sources.contains(i)).take(n_real).collect();
    if sources.len() < n_synth || reals.len() < n_real {
        let n_eligible = order.iter().filter(|i| eligible(i)).count();
        return Err(VttError::Shortfall(format!(
            "{} session needs {n_synth} synthetic sources ({} eligible of {} held-out images) and {n_real} \
             disjoint real images ({} available)",
            spec.kind.as_str(),
            n_eligible,
            pool.len(),
            pool.len() - sources.len()
        )));
    }

    let images: Vec<Vec<f32>> = sources.iter().map(|&i| pool[i].pixels.clone()).collect();
    let targets: Vec<usize> = sources.iter().map(|&i| (pool[i].bin as i64 + shift) as usize).collect();
    let generated = synth.generate(&images, &targets)?;
    if generated.len() != sources.len() {
        return Err(VttError::Model(bapgan_core::Error::Contract(format!(
            "synthesizer returned {} images for {} sources",
            generated.len(),
            sources.len()
        ))));
    }

    let size = (pool[0].pixels.len() as f64).sqrt() as usize;
    let lengths = pool.iter().map(|p| p.pixels.len()).chain(generated.iter().map(Vec::len));
    if let Some(bad) = lengths.into_iter().find(|&n| n != size * size) {
        return Err(VttError::BadRequest(format!("image of {bad} pixels, expected {size}x{size}")));
    }
    let mut real_trials = reals.iter().map(|&i| PlannedTrial {
        truth: Truth::Real,
        pixels: pool[i].pixels.clone(),
        size,
    });
    let mut synth_trials = generated.into_iter().map(|pixels| PlannedTrial {
        truth: Truth::Synthetic,
        pixels,
        size,
    });
    let mut trials = Vec::with_capacity(n_real + n_synth);
    loop {
        let (r, s) = (real_trials.next(), synth_trials.next());
        if r.is_none() && s.is_none() {
            break;
        }
        trials.extend(r);
        trials.extend(s);
    }
    trials.shuffle(&mut rng);
    Ok(trials)
}

/// Source of trials for a session spec.
pub trait TrialSource: Send + Sync {
    fn plan(&self, spec: &VttSessionSpec) -> Result<Vec<PlannedTrial>, VttError>;
}

/// Datasets under `dataset_root/<dataset_tag>/manifest.csv`, checkpoints
/// under `checkpoint_root/<dataset_tag>/<model_tag>` or, failing that,
/// `checkpoint_root/<model_tag>`.
#[derive(Debug, Clone)]
pub struct DiskSource {
    pub dataset_root: PathBuf,
    pub checkpoint_root: PathBuf,
    /// Held-out split the images come from.
    pub split: Split,
}

impl DiskSource {
    pub fn checkpoint_dir(&self, spec: &VttSessionSpec) -> Result<PathBuf, VttError> {
        let tagged = self.checkpoint_root.join(&spec.dataset_tag).join(spec.model_tag.as_str());
        let plain = self.checkpoint_root.join(spec.model_tag.as_str());
        [tagged, plain]
            .into_iter()
            .find(|p| p.join("manifest.json").is_file())
            .ok_or_else(|| {
                VttError::NotFound(format!(
                    "no {} checkpoint for dataset {:?} under {}",
                    spec.model_tag.as_str(),
                    spec.dataset_tag,
                    self.checkpoint_root.display()
                ))
            })
    }

    fn manifest_path(&self, spec: &VttSessionSpec) -> Result<PathBuf, VttError> {
        let p = self.dataset_root.join(&spec.dataset_tag).join("manifest.csv");
        if p.is_file() {
            Ok(p)
        } else {
            Err(VttError::NotFound(format!("no dataset manifest at {}", p.display())))
        }
    }

    fn load(&self, spec: &VttSessionSpec) -> Result<(ModelParams<f32>, Vec<HeldOutImage>), VttError> {
        let params = load_model(&self.checkpoint_dir(spec)?)?;
        let manifest = load_manifest(&self.manifest_path(spec)?)?;
        let records = manifest.records_in(self.split);
        let data = Dataset::load(&manifest, &records, params.config.image_size, params.config.age_bins)?;
        let pool = data
            .images
            .into_iter()
            .zip(data.bins)
            .map(|(pixels, bin)| HeldOutImage { pixels, bin })
            .collect();
        Ok((params, pool))
    }
}

impl TrialSource for DiskSource {
    fn plan(&self, spec: &VttSessionSpec) -> Result<Vec<PlannedTrial>, VttError> {
        let (params, pool) = self.load(spec)?;
        plan_trials(spec, &pool, &ModelSynthesizer { params })
    }
}
