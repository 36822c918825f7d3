//! Alternating adversarial optimization with two-timescale Adam,
//! checkpointing and a per-step metric log.

mod checkpoint;
mod metrics;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use metrics::{MetricLog, MetricRow, METRIC_HEADER};

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};

use bapgan_autograd::{Adam, AdamConfig, AdamMoments, Graph, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, augment_seed, AugmentConfig, Dataset};
use crate::model::{bind, discriminate_image, init_params, ModelParams, Network};
use crate::objectives::{build_losses, compose_losses, one_hot, smooth_age_labels, LossBundle, LossScope, LossWeights};
use crate::{Error, ModelConfig, Result};

/// Number of recent step records kept in [`TrainState::history`].
pub const HISTORY_LEN: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: u64,
    pub batch: usize,
    /// Learning rate of `E`, `G` and `D_id`.
    pub lr_eg_did: f64,
    /// Learning rate of `D_img` and `D_age`.
    pub lr_dimg_dage: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 disables periodic ones).
    pub checkpoint_every: u64,
    /// Measure age-classifier accuracy on the validation split every this
    /// many steps (0 disables it).
    pub eval_every: u64,
    /// Augment training images; `None` trains on the raw images.
    pub augment: Option<AugmentConfig>,
    /// Power iterations per step for spectrally normalized weights.
    pub spectral_iters: usize,
}

impl TrainConfig {
    /// 50 000 steps of batch 32 on the 128×128 model.
    pub fn full() -> Self {
        Self {
            model: ModelConfig::full(),
            steps: 50_000,
            batch: 32,
            lr_eg_did: 1e-4,
            lr_dimg_dage: 4e-4,
            beta1: 0.5,
            beta2: 0.999,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 5_000,
            eval_every: 500,
            augment: Some(AugmentConfig::default()),
            spectral_iters: 1,
        }
    }

    /// 2000 steps of batch 16 on the 64×64 model.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            steps: 2_000,
            batch: 16,
            checkpoint_every: 500,
            eval_every: 100,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr_eg_did >= 0.0 && self.lr_dimg_dage >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.model.spectral_norm && self.spectral_iters == 0 {
            return Err(Error::Config("spectral normalization needs at least one power iteration".into()));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }

    pub fn learning_rate(&self, network: Network) -> f64 {
        match network {
            Network::ImageDiscriminator => self.lr_dimg_dage,
            _ => self.lr_eg_did,
        }
    }

    fn adam(&self, network: Network) -> Adam {
        Adam::new(AdamConfig {
            lr: self.learning_rate(network),
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        })
    }
}

/// Losses of one completed step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub bundle: LossBundle,
    pub age_val_acc: Option<f64>,
}

/// Everything needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams<f32>,
    pub moments: BTreeMap<String, AdamMoments<f32>>,
    /// Completed steps.
    pub step: u64,
    /// Stream for prior samples `z★`.
    pub prior_rng: ChaCha8Rng,
    pub history: VecDeque<StepRecord>,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params::<f32>(&config.model, config.seed)?;
        let moments = params
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), AdamMoments::zeros(t.len())))
            .collect();
        Ok(Self {
            params,
            moments,
            step: 0,
            prior_rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5052_494f_525f_5a53),
            history: VecDeque::new(),
        })
    }

    fn apply(&mut self, adam: &Adam, t: u64, name: &str, grad: &Tensor<f32>) {
        let p = self.params.tensors.get_mut(name).expect("gradient for a known parameter");
        let m = self.moments.get_mut(name).expect("moments for every parameter");
        adam.step(t, p, grad, m);
    }
}

fn check_finite(step: u64, parts: &BTreeMap<String, f64>) -> Result<()> {
    if parts.values().all(|v| v.is_finite()) {
        return Ok(());
    }
    let components = parts.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ");
    Err(Error::NonFinite { step, components })
}

/// One alternating update: `D_img` (with `D_age`), then `D_id`, then `E` and
/// `G` jointly. `bins` are the subjects' age bins.
pub fn train_step(state: &mut TrainState, config: &TrainConfig, x: &Tensor<f32>, bins: &[usize]) -> Result<LossBundle> {
    let model = &config.model;
    crate::model::check_images(model, x)?;
    if bins.len() != x.dim(0) {
        return Err(Error::Dimension(format!("{} labels for a batch of {}", bins.len(), x.dim(0))));
    }
    let step = state.step + 1;
    if model.spectral_norm {
        state.params.refresh_spectral(config.spectral_iters);
    }
    let batch = bins.len();
    let prior = Tensor::new(
        vec![batch, model.latent_dim],
        (0..batch * model.latent_dim).map(|_| state.prior_rng.gen_range(-1.0f32..=1.0)).collect(),
    )?;
    let mut labels = one_hot::<f32>(bins, model.age_bins)?;
    if model.use_ls {
        labels = smooth_age_labels(&labels, model.smoothing as f32)?;
    }

    // discriminators: both losses come from one graph, and neither depends
    // on the other's parameters, so this equals updating them in sequence
    let mut parts = {
        let g = Graph::new();
        let b = bind(&g, &state.params, &|n| {
            matches!(n, Network::ImageDiscriminator | Network::IdentityDiscriminator)
        });
        let v = build_losses(&b, x, &labels, &prior, &config.weights, LossScope::Discriminators)?;
        let parts = v.component_values();
        check_finite(step, &parts)?;
        let img_total = v.image_discriminator_total().expect("image discriminator loss");
        let img_grads = g.backward(img_total);
        let id_grads = g.backward(v.loss_did.expect("identity discriminator loss"));
        let img_adam = config.adam(Network::ImageDiscriminator);
        let id_adam = config.adam(Network::IdentityDiscriminator);
        for (name, var) in b.vars() {
            match Network::of(name) {
                Network::ImageDiscriminator => state.apply(&img_adam, step, name, &img_grads.get_or_zero(*var)),
                Network::IdentityDiscriminator => state.apply(&id_adam, step, name, &id_grads.get_or_zero(*var)),
                _ => {}
            }
        }
        parts
    };

    {
        let g = Graph::new();
        let b = bind(&g, &state.params, &|n| matches!(n, Network::Encoder | Network::Generator));
        let v = build_losses(&b, x, &labels, &prior, &config.weights, LossScope::EncoderGenerator)?;
        let eg_parts = v.component_values();
        check_finite(step, &eg_parts)?;
        let grads = g.backward(v.loss_eg.expect("encoder/generator loss"));
        let adam = config.adam(Network::Encoder);
        for (name, var) in b.vars() {
            if matches!(Network::of(name), Network::Encoder | Network::Generator) {
                state.apply(&adam, step, name, &grads.get_or_zero(*var));
            }
        }
        parts.extend(eg_parts);
    }

    let bundle = compose_losses(model, &config.weights, &parts)?;
    if !bundle.all_finite() {
        return Err(Error::NonFinite {
            step,
            components: bundle.describe(),
        });
    }
    state.step = step;
    Ok(bundle)
}

/// Order in which samples are visited: a fresh seeded permutation per
/// epoch, independent of any mutable state.
fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order
}

/// The batch of (1-based) step `step`: images (augmented when configured)
/// and their bins.
pub fn batch_for_step(config: &TrainConfig, data: &Dataset, step: u64) -> (Tensor<f32>, Vec<usize>) {
    let n = data.len();
    let s = data.image_size;
    let first = (step - 1) * config.batch as u64;
    let mut pixels = Vec::with_capacity(config.batch * s * s);
    let mut bins = Vec::with_capacity(config.batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for k in 0..config.batch as u64 {
        let pos = first + k;
        let epoch = pos / n as u64;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            cached = Some((epoch, epoch_order(config.seed, epoch, n)));
        }
        let idx = cached.as_ref().expect("order").1[(pos % n as u64) as usize];
        match &config.augment {
            Some(a) => pixels.extend(augment(&data.images[idx], s, augment_seed(config.seed, epoch, idx as u64), a)),
            None => pixels.extend_from_slice(&data.images[idx]),
        }
        bins.push(data.bins[idx]);
    }
    (Tensor::new(vec![config.batch, 1, s, s], pixels).expect("batch shape"), bins)
}

/// Fraction of images whose arg-max age logit equals their bin; `None`
/// without an age classifier.
pub fn age_accuracy(params: &ModelParams<f32>, data: &Dataset) -> Result<Option<f64>> {
    if !params.config.use_dage || data.is_empty() {
        return Ok(None);
    }
    let k = params.config.age_bins;
    let mut correct = 0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(64) {
        let x = data.batch(chunk);
        // labels only feed the realness head
        let labels = one_hot::<f32>(&vec![0; chunk.len()], k)?;
        let logits = discriminate_image(params, &x, &labels)?.age_logits.expect("age head");
        for (row, &i) in logits.data().chunks(k).zip(chunk) {
            let arg = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0;
            correct += (arg == data.bins[i]) as usize;
        }
    }
    Ok(Some(correct as f64 / data.len() as f64))
}

/// Where [`train`] writes its outputs.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.checkpoints().join(format!("step_{step:07}"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("final")
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
}

/// Run (or continue) training until `config.steps`. `on_step` sees every
/// completed step.
pub fn train(
    config: &TrainConfig,
    train_data: &Dataset,
    val_data: Option<&Dataset>,
    output: Option<&RunOutput>,
    resume: Option<TrainState>,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<TrainState> {
    config.validate()?;
    if train_data.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if train_data.image_size != config.model.image_size {
        return Err(Error::Config(format!(
            "dataset images are {}px, model expects {}px",
            train_data.image_size, config.model.image_size
        )));
    }
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::new(config)?,
    };
    let mut log = match output {
        Some(o) => {
            std::fs::create_dir_all(o.checkpoints()).map_err(|e| Error::io(o.checkpoints(), e))?;
            Some(MetricLog::open(&o.metrics(), state.step)?)
        }
        None => None,
    };
    while state.step < config.steps {
        let (x, bins) = batch_for_step(config, train_data, state.step + 1);
        let bundle = train_step(&mut state, config, &x, &bins)?;
        let age_val_acc = match val_data {
            Some(v) if config.eval_every > 0 && state.step % config.eval_every == 0 => age_accuracy(&state.params, v)?,
            _ => None,
        };
        let record = StepRecord {
            step: state.step,
            bundle,
            age_val_acc,
        };
        if let Some(log) = log.as_mut() {
            log.append(&MetricRow::from(&record))?;
        }
        on_step(&record);
        if state.history.len() == HISTORY_LEN {
            state.history.pop_front();
        }
        state.history.push_back(record);
        if let Some(o) = output {
            if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
                save_checkpoint(&state, config, &o.checkpoint(state.step))?;
            }
        }
    }
    if let Some(o) = output {
        save_checkpoint(&state, config, &o.final_checkpoint())?;
    }
    Ok(state)
}

/// Load the parameters of a checkpoint directory for inference.
pub fn load_model(dir: &Path) -> Result<ModelParams<f32>> {
    Ok(load_checkpoint(dir)?.0.params)
}
