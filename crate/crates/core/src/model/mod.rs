//! The five networks (encoder, generator, identity discriminator, image
//! discriminator and age classifier) as pure functions of [`ModelParams`].

mod attention;
mod networks;
mod spectral;

use std::collections::BTreeMap;

use bapgan_autograd::{Graph, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

pub use attention::{self_attention, SelfAttentionOutput, SelfAttentionParams};
pub use networks::{
    bind, discriminator_graph, encoder_graph, generator_graph, identity_graph, label_planes, Bound,
};
pub use spectral::{spectral_normalize, SpectralNormalized, SpectralState, SIGMA_FLOOR};

use crate::{ModelConfig, Result};

/// Which network a parameter belongs to. Determines the optimizer group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Network {
    Encoder,
    Generator,
    IdentityDiscriminator,
    /// Image discriminator together with the age head (and the age trunk
    /// when it is separate); updated jointly.
    ImageDiscriminator,
}

impl Network {
    pub fn of(name: &str) -> Network {
        match name.split('.').next() {
            Some("enc") => Network::Encoder,
            Some("gen") => Network::Generator,
            Some("did") => Network::IdentityDiscriminator,
            _ => Network::ImageDiscriminator,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal,
    Zero,
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
    spectral: bool,
}

/// All learnable state of the model plus spectral-normalization vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor<T>>,
    pub spectral: BTreeMap<String, SpectralState<T>>,
}

/// Standard deviation of the weight initializer.
const INIT_STD: f64 = 0.02;

pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    let mut tensors = BTreeMap::new();
    let mut spectral = BTreeMap::new();
    for spec in param_specs(config) {
        let n: usize = spec.shape.iter().product();
        let data: Vec<T> = match spec.init {
            Init::Normal => (0..n).map(|_| T::from_f64_lossy(normal.sample(&mut rng))).collect(),
            Init::Zero => vec![T::zero(); n],
        };
        let tensor = Tensor::new(spec.shape.clone(), data)?;
        if spec.spectral {
            let rows = spec.shape[0];
            let mut u: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            u.iter_mut().for_each(|x| *x /= norm);
            let mut state = SpectralState {
                u: u.into_iter().map(T::from_f64_lossy).collect(),
                v: Vec::new(),
            };
            spectral::power_iterate(tensor.data(), &mut state, 1);
            spectral.insert(spec.name.clone(), state);
        }
        tensors.insert(spec.name, tensor);
    }
    Ok(ModelParams {
        config: config.clone(),
        tensors,
        spectral,
    })
}

impl<T: Scalar> ModelParams<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    /// Names of every self-attention gate.
    pub fn gate_names(&self) -> Vec<String> {
        self.tensors.keys().filter(|k| k.ends_with(".gamma")).cloned().collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// One (or more) power iterations for every spectrally normalized
    /// weight, updating the persistent `u`/`v` estimates.
    pub fn refresh_spectral(&mut self, n_iter: usize) {
        for (name, state) in self.spectral.iter_mut() {
            let w = &self.tensors[name];
            spectral::power_iterate(w.data(), state, n_iter);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            spectral: self
                .spectral
                .iter()
                .map(|(k, s)| {
                    let conv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.to_f64().unwrap_or(f64::NAN))).collect();
                    (k.clone(), SpectralState { u: conv(&s.u), v: conv(&s.v) })
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.all_finite())
    }
}

fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let sn = config.spectral_norm;
    let mut push = |name: String, shape: Vec<usize>, init: Init, spectral: bool| {
        specs.push(ParamSpec {
            name,
            shape,
            init,
            spectral,
        });
    };
    let layer = |push: &mut dyn FnMut(String, Vec<usize>, Init, bool), prefix: &str, w: Vec<usize>, spectral: bool| {
        let out = if prefix.contains("deconv") { w[1] } else { w[0] };
        push(format!("{prefix}.weight"), w, Init::Normal, spectral);
        push(format!("{prefix}.bias"), vec![out], Init::Zero, false);
    };
    let attention = |push: &mut dyn FnMut(String, Vec<usize>, Init, bool), prefix: &str, c: usize, spectral: bool| {
        let inner = c / config.sa_reduction;
        for (part, out) in [("query", inner), ("key", inner), ("value", c)] {
            push(format!("{prefix}.sa.{part}.weight"), vec![out, c, 1, 1], Init::Normal, spectral);
            push(format!("{prefix}.sa.{part}.bias"), vec![out], Init::Zero, false);
        }
        push(format!("{prefix}.sa.gamma"), vec![1], Init::Zero, false);
    };

    let stages = config.encoder_stages();
    let s = config.image_size;
    let top = config.generator_top_channels();

    // encoder
    let mut c_in = 1;
    for i in 0..stages {
        let c_out = config.base_channels << i;
        layer(&mut push, &format!("enc.conv{i}"), vec![c_out, c_in, 4, 4], false);
        c_in = c_out;
    }
    layer(&mut push, "enc.fc", vec![config.latent_dim, top * 16], false);

    // generator
    layer(&mut push, "gen.fc", vec![top * 16, config.latent_dim + config.age_bins], false);
    if config.use_sa && config.sa_resolution == 4 {
        attention(&mut push, "gen", top, false);
    }
    let mut c_in = top;
    for i in 0..stages {
        let res = 8 << i;
        let c_out = if i + 1 == stages { 1 } else { c_in / 2 };
        layer(&mut push, &format!("gen.deconv{i}"), vec![c_in, c_out, 4, 4], false);
        if config.use_sa && res == config.sa_resolution && res < s {
            attention(&mut push, "gen", c_out, false);
        }
        c_in = c_out;
    }

    // image discriminator trunk + heads
    let trunk = |push: &mut dyn FnMut(String, Vec<usize>, Init, bool), prefix: &str| {
        let mut c_in = 1;
        for i in 0..config.trunk_stages() {
            let c_out = config.base_channels << i;
            let res = s >> (i + 1);
            let w = vec![c_out, c_in, 4, 4];
            push(format!("{prefix}.conv{i}.weight"), w, Init::Normal, sn);
            push(format!("{prefix}.conv{i}.bias"), vec![c_out], Init::Zero, false);
            if config.use_sa && res == config.sa_resolution {
                attention(push, prefix, c_out, sn);
            }
            c_in = c_out;
        }
    };
    trunk(&mut push, "dimg");
    let r = config.trunk_resolution();
    let c = config.trunk_channels();
    layer(&mut push, "dimg.real_head", vec![1, (c + config.age_bins) * r * r], sn);
    if config.use_dage {
        if config.separate_age_trunk {
            trunk(&mut push, "dage");
            layer(&mut push, "dage.age_head", vec![config.age_bins, c * r * r], sn);
        } else {
            layer(&mut push, "dimg.age_head", vec![config.age_bins, c * r * r], sn);
        }
    }

    // identity discriminator
    let sizes = [config.latent_dim, 64, 32, 16, 1];
    for i in 0..4 {
        layer(&mut push, &format!("did.fc{i}"), vec![sizes[i + 1], sizes[i]], sn);
    }
    specs
}

pub(crate) fn check_images<T: Scalar>(config: &ModelConfig, x: &Tensor<T>) -> Result<usize> {
    let s = config.image_size;
    let shape = x.shape();
    if shape.len() != 4 || shape[0] == 0 || shape[1] != 1 || shape[2] != s || shape[3] != s {
        return Err(crate::Error::Dimension(format!("expected images [B, 1, {s}, {s}], got {shape:?}")));
    }
    Ok(shape[0])
}

pub(crate) fn check_rows<T: Scalar>(what: &str, x: &Tensor<T>, batch: Option<usize>, width: usize) -> Result<usize> {
    let shape = x.shape();
    let ok = shape.len() == 2 && shape[0] > 0 && shape[1] == width && batch.is_none_or(|b| b == shape[0]);
    if !ok {
        return Err(crate::Error::Dimension(format!(
            "expected {what} [{}, {width}], got {shape:?}",
            batch.map(|b| b.to_string()).unwrap_or_else(|| "B".into())
        )));
    }
    Ok(shape[0])
}

/// `E(x)`: images `[B, 1, S, S]` to identity codes `[B, d_z]` in `[-1, 1]`.
pub fn encode<T: Scalar>(params: &ModelParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    check_images(&params.config, x)?;
    let g = Graph::new();
    let b = bind(&g, params, &|_| false);
    let z = encoder_graph(&b, g.constant(x.clone()))?;
    Ok((*z.value()).clone())
}

/// `G(z, l)`: codes `[B, d_z]` and labels `[B, K]` to images in `[-1, 1]`.
pub fn generate<T: Scalar>(params: &ModelParams<T>, z: &Tensor<T>, labels: &Tensor<T>) -> Result<Tensor<T>> {
    let batch = check_rows("latent codes", z, None, params.config.latent_dim)?;
    check_rows("age labels", labels, Some(batch), params.config.age_bins)?;
    let g = Graph::new();
    let b = bind(&g, params, &|_| false);
    let x = generator_graph(&b, g.constant(z.clone()), g.constant(labels.clone()))?;
    Ok((*x.value()).clone())
}

/// `D_id(z)`: one score in `(0, 1)` per code.
pub fn discriminate_identity<T: Scalar>(params: &ModelParams<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
    check_rows("latent codes", z, None, params.config.latent_dim)?;
    let g = Graph::new();
    let b = bind(&g, params, &|_| false);
    let s = identity_graph(&b, g.constant(z.clone()))?;
    Ok((*s.value()).clone())
}

/// Output of the image discriminator and, when enabled, the age classifier.
#[derive(Debug, Clone)]
pub struct ImageDiscrimination<T> {
    /// `[B]` realness scores in `(0, 1)`.
    pub realness: Tensor<T>,
    /// `[B, K]` unnormalized age logits; `None` without the age head.
    pub age_logits: Option<Tensor<T>>,
}

pub fn discriminate_image<T: Scalar>(
    params: &ModelParams<T>,
    x: &Tensor<T>,
    labels: &Tensor<T>,
) -> Result<ImageDiscrimination<T>> {
    let batch = check_images(&params.config, x)?;
    check_rows("age labels", labels, Some(batch), params.config.age_bins)?;
    let g = Graph::new();
    let b = bind(&g, params, &|_| false);
    let out = discriminator_graph(&b, g.constant(x.clone()), labels)?;
    Ok(ImageDiscrimination {
        realness: (*out.realness.value()).clone(),
        age_logits: out.age_logits.map(|l| (*l.value()).clone()),
    })
}

/// Extract one attention block's weights (e.g. prefix `"gen"` or `"dimg"`).
pub fn attention_params<T: Scalar>(params: &ModelParams<T>, prefix: &str) -> Option<SelfAttentionParams<T>> {
    let get = |part: &str| params.tensors.get(&format!("{prefix}.sa.{part}")).cloned();
    Some(SelfAttentionParams {
        query_weight: get("query.weight")?,
        query_bias: get("query.bias")?,
        key_weight: get("key.weight")?,
        key_bias: get("key.bias")?,
        value_weight: get("value.weight")?,
        value_bias: get("value.bias")?,
        gamma: get("gamma")?.data()[0],
    })
}
