//! Recording (differentiable) forms of the networks.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use bapgan_autograd::{Graph, Scalar, Tensor, Var};

use super::attention::{attention_block, AttentionVars};
use super::{ModelParams, Network, SpectralState};
use crate::{Error, ModelConfig, Result};

const LEAK: f64 = 0.2;

/// Model parameters placed on a [`Graph`], either as trainable leaves or as
/// constants.
pub struct Bound<'g, T: Scalar> {
    graph: &'g Graph<T>,
    config: ModelConfig,
    vars: BTreeMap<String, Var<'g, T>>,
    spectral: BTreeMap<String, SpectralState<T>>,
    normalized: RefCell<HashMap<String, Var<'g, T>>>,
}

/// Bind every parameter; `trainable` decides which networks get gradients.
pub fn bind<'g, T: Scalar>(
    graph: &'g Graph<T>,
    params: &ModelParams<T>,
    trainable: &dyn Fn(Network) -> bool,
) -> Bound<'g, T> {
    let vars = params
        .tensors
        .iter()
        .map(|(name, t)| {
            let v = if trainable(Network::of(name)) {
                graph.param(t.clone())
            } else {
                graph.constant(t.clone())
            };
            (name.clone(), v)
        })
        .collect();
    Bound {
        graph,
        config: params.config.clone(),
        vars,
        spectral: params.spectral.clone(),
        normalized: RefCell::new(HashMap::new()),
    }
}

impl<'g, T: Scalar> Bound<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Leaf for a named parameter.
    pub fn var(&self, name: &str) -> Option<Var<'g, T>> {
        self.vars.get(name).copied()
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var<'g, T>)> {
        self.vars.iter()
    }

    fn raw(&self, name: &str) -> Result<Var<'g, T>> {
        self.var(name)
            .ok_or_else(|| Error::Contract(format!("parameter {name} missing for this configuration")))
    }

    /// Weight as used in the forward pass: divided by its spectral-norm
    /// estimate when it has persistent power-iteration state.
    fn weight(&self, name: &str) -> Result<Var<'g, T>> {
        let raw = self.raw(name)?;
        let Some(state) = self.spectral.get(name) else {
            return Ok(raw);
        };
        if let Some(v) = self.normalized.borrow().get(name) {
            return Ok(*v);
        }
        let v = raw.spectral_scale(&state.u, &state.v)?;
        self.normalized.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    fn conv(&self, prefix: &str, x: Var<'g, T>, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        let w = self.weight(&format!("{prefix}.weight"))?;
        let b = self.raw(&format!("{prefix}.bias"))?;
        Ok(x.conv2d(w, Some(b), stride, pad)?)
    }

    fn deconv(&self, prefix: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let w = self.weight(&format!("{prefix}.weight"))?;
        let b = self.raw(&format!("{prefix}.bias"))?;
        Ok(x.conv_transpose2d(w, Some(b), 2, 1)?)
    }

    fn linear(&self, prefix: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let w = self.weight(&format!("{prefix}.weight"))?;
        let b = self.raw(&format!("{prefix}.bias"))?;
        Ok(x.linear(w, Some(b))?)
    }

    fn attention(&self, prefix: &str, f: Var<'g, T>) -> Result<Var<'g, T>> {
        let p = |part: &str| format!("{prefix}.sa.{part}");
        let vars = AttentionVars {
            query_weight: self.weight(&p("query.weight"))?,
            query_bias: self.raw(&p("query.bias"))?,
            key_weight: self.weight(&p("key.weight"))?,
            key_bias: self.raw(&p("key.bias"))?,
            value_weight: self.weight(&p("value.weight"))?,
            value_bias: self.raw(&p("value.bias"))?,
            gamma: self.raw(&p("gamma"))?,
        };
        Ok(attention_block(f, &vars)?.0)
    }

    fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }
}

fn leak<T: Scalar>() -> T {
    T::from_f64_lossy(LEAK)
}

pub fn encoder_graph<'g, T: Scalar>(b: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let mut h = x;
    for i in 0..b.config.encoder_stages() {
        h = b.conv(&format!("enc.conv{i}"), h, 2, 1)?.leaky_relu(leak());
    }
    let batch = h.shape()[0];
    let flat = h.reshape(vec![batch, h.value().len() / batch])?;
    Ok(b.linear("enc.fc", flat)?.tanh())
}

pub fn generator_graph<'g, T: Scalar>(b: &Bound<'g, T>, z: Var<'g, T>, labels: Var<'g, T>) -> Result<Var<'g, T>> {
    let cfg = &b.config;
    let batch = z.shape()[0];
    let top = cfg.generator_top_channels();
    let input = z.concat_channels(labels)?;
    let mut h = b.linear("gen.fc", input)?.relu().reshape(vec![batch, top, 4, 4])?;
    if cfg.use_sa && cfg.sa_resolution == 4 {
        h = b.attention("gen", h)?;
    }
    let stages = cfg.encoder_stages();
    for i in 0..stages {
        h = b.deconv(&format!("gen.deconv{i}"), h)?;
        if i + 1 == stages {
            return Ok(h.tanh());
        }
        h = h.relu();
        if cfg.use_sa && (8 << i) == cfg.sa_resolution {
            h = b.attention("gen", h)?;
        }
    }
    unreachable!("encoder_stages() >= 1 for validated configs")
}

pub fn identity_graph<'g, T: Scalar>(b: &Bound<'g, T>, z: Var<'g, T>) -> Result<Var<'g, T>> {
    let mut h = z;
    for i in 0..4 {
        h = b.linear(&format!("did.fc{i}"), h)?;
        if i < 3 {
            h = h.leaky_relu(leak());
        }
    }
    let batch = h.shape()[0];
    Ok(h.sigmoid().reshape(vec![batch])?)
}

/// Labels `[B, K]` tiled into `K` constant planes of side `res`.
pub fn label_planes<T: Scalar>(labels: &Tensor<T>, res: usize) -> Tensor<T> {
    let (batch, k) = (labels.dim(0), labels.dim(1));
    let plane = res * res;
    let mut data = Vec::with_capacity(batch * k * plane);
    for &v in labels.data() {
        data.extend(std::iter::repeat_n(v, plane));
    }
    Tensor::new(vec![batch, k, res, res], data).expect("label planes")
}

pub struct DiscriminatorVars<'g, T: Scalar> {
    pub realness: Var<'g, T>,
    pub age_logits: Option<Var<'g, T>>,
}

fn trunk<'g, T: Scalar>(b: &Bound<'g, T>, prefix: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let cfg = &b.config;
    let mut h = x;
    for i in 0..cfg.trunk_stages() {
        h = b.conv(&format!("{prefix}.conv{i}"), h, 2, 1)?.leaky_relu(leak());
        if cfg.use_sa && (cfg.image_size >> (i + 1)) == cfg.sa_resolution {
            h = b.attention(prefix, h)?;
        }
    }
    Ok(h)
}

/// Shared-trunk image discriminator. The age head reads trunk features of
/// the image alone; the label planes join only the realness head, so the
/// age classifier cannot read the answer from its input.
pub fn discriminator_graph<'g, T: Scalar>(
    b: &Bound<'g, T>,
    x: Var<'g, T>,
    labels: &Tensor<T>,
) -> Result<DiscriminatorVars<'g, T>> {
    let cfg = &b.config;
    let batch = x.shape()[0];
    let features = trunk(b, "dimg", x)?;
    let r = cfg.trunk_resolution();
    let planes = b.graph.constant(label_planes(labels, r));
    let cond = features.concat_channels(planes)?;
    let cond = cond.reshape(vec![batch, cond.value().len() / batch])?;
    let realness = b.linear("dimg.real_head", cond)?.sigmoid().reshape(vec![batch])?;
    let age_logits = if !cfg.use_dage {
        None
    } else if b.has("dage.age_head.weight") {
        let f = trunk(b, "dage", x)?;
        let flat = f.reshape(vec![batch, f.value().len() / batch])?;
        Some(b.linear("dage.age_head", flat)?)
    } else {
        let flat = features.reshape(vec![batch, features.value().len() / batch])?;
        Some(b.linear("dimg.age_head", flat)?)
    };
    Ok(DiscriminatorVars { realness, age_logits })
}
