//! Finite-difference verification of the analytic gradients.

use bapgan_autograd::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{bind, init_params, ModelParams};
use crate::objectives::{build_losses, one_hot, smooth_age_labels, LossScope, LossVars, LossWeights};
use crate::{ModelConfig, Result};

/// The four trainable losses, in a fixed order.
pub const LOSS_NAMES: [&str; 4] = ["loss_eg", "loss_did", "loss_dimg", "loss_dage"];

/// Smallest configuration that still contains every layer type:
/// 8×8 images, `d_z = 4`, `K = 3`, four base channels, attention at 4×4.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        latent_dim: 4,
        age_bins: 3,
        base_channels: 4,
        sa_resolution: 4,
        sa_reduction: 2,
        ..ModelConfig::full()
    }
}

#[derive(Debug, Clone)]
pub struct GradientMismatch {
    pub loss: &'static str,
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradientCheckReport {
    /// Number of (loss, scalar parameter) pairs compared.
    pub checked: usize,
    /// Largest relative error per loss.
    pub max_relative_error: [f64; 4],
    pub worst: Option<GradientMismatch>,
}

impl GradientCheckReport {
    pub fn max_error(&self) -> f64 {
        self.max_relative_error.iter().cloned().fold(0.0, f64::max)
    }
}

struct Inputs {
    x: Tensor<f64>,
    labels: Tensor<f64>,
    prior: Tensor<f64>,
}

fn inputs(config: &ModelConfig, batch: usize, rng: &mut ChaCha8Rng) -> Result<Inputs> {
    let s = config.image_size;
    let x = Tensor::new(
        vec![batch, 1, s, s],
        (0..batch * s * s).map(|_| rng.gen_range(-0.9..0.9)).collect(),
    )?;
    let bins: Vec<usize> = (0..batch).map(|i| i % config.age_bins).collect();
    let mut labels = one_hot::<f64>(&bins, config.age_bins)?;
    if config.use_ls {
        labels = smooth_age_labels(&labels, config.smoothing)?;
    }
    let prior = Tensor::new(
        vec![batch, config.latent_dim],
        (0..batch * config.latent_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    Ok(Inputs { x, labels, prior })
}

fn roots<'g>(v: &LossVars<'g, f64>) -> [bapgan_autograd::Var<'g, f64>; 4] {
    let dage = v.loss_dage.expect("age loss present");
    [v.loss_eg.expect("eg"), v.loss_did.expect("did"), v.loss_dimg.expect("dimg"), dage]
}

fn evaluate(params: &ModelParams<f64>, inp: &Inputs, weights: &LossWeights) -> Result<[f64; 4]> {
    let g = Graph::new();
    let b = bind(&g, params, &|_| false);
    let v = build_losses(&b, &inp.x, &inp.labels, &inp.prior, weights, LossScope::All)?;
    Ok(roots(&v).map(|r| r.item()))
}

/// Compare analytic gradients of all four losses with central differences
/// for every scalar parameter of a freshly initialized model.
///
/// Spectral-norm vectors stay fixed during the comparison (they are
/// constants of one training step). Attention gates are set to `gate`
/// so that the attention weights influence the output. Biases are drawn
/// from `U(-0.5, 0.5)` instead of zero: at initialization most
/// pre-activations are within a finite-difference step of a ReLU kink.
pub fn gradient_check(config: &ModelConfig, seed: u64, step: f64, gate: f64) -> Result<GradientCheckReport> {
    let mut params = init_params::<f64>(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    for (name, t) in params.tensors.iter_mut() {
        if name.ends_with(".bias") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    }
    for name in params.gate_names() {
        params.tensors.insert(name, Tensor::new(vec![1], vec![gate])?);
    }
    let inp = inputs(config, 3, &mut rng)?;
    let weights = LossWeights::default();
    let base = evaluate(&params, &inp, &weights)?;

    let g = Graph::new();
    let b = bind(&g, &params, &|_| true);
    let v = build_losses(&b, &inp.x, &inp.labels, &inp.prior, &weights, LossScope::All)?;
    let analytic: Vec<Vec<(String, Tensor<f64>)>> = roots(&v)
        .iter()
        .map(|&root| {
            let grads = g.backward(root);
            b.vars().map(|(name, var)| (name.clone(), grads.get_or_zero(*var))).collect()
        })
        .collect();

    let mut report = GradientCheckReport {
        checked: 0,
        max_relative_error: [0.0; 4],
        worst: None,
    };
    let names: Vec<String> = params.tensors.keys().cloned().collect();
    for (pi, name) in names.iter().enumerate() {
        for idx in 0..params.tensors[name].len() {
            let orig = params.tensors[name].data()[idx];
            params.tensors.get_mut(name).expect("param").data_mut()[idx] = orig + step;
            let plus = evaluate(&params, &inp, &weights)?;
            params.tensors.get_mut(name).expect("param").data_mut()[idx] = orig - step;
            let minus = evaluate(&params, &inp, &weights)?;
            params.tensors.get_mut(name).expect("param").data_mut()[idx] = orig;
            for l in 0..4 {
                let numeric = (plus[l] - minus[l]) / (2.0 * step);
                let a = analytic[l][pi].1.data()[idx];
                // absolute floor proportional to the loss: cancellation error of
                // the difference quotient grows with |L| / step
                let floor = 1e-6 * base[l].abs().max(1.0);
                let denom = a.abs().max(numeric.abs()).max(floor);
                let rel = (a - numeric).abs() / denom;
                report.checked += 1;
                if rel > report.max_relative_error[l] {
                    report.max_relative_error[l] = rel;
                }
                if report.worst.as_ref().is_none_or(|w| rel > w.relative_error) {
                    report.worst = Some(GradientMismatch {
                        loss: LOSS_NAMES[l],
                        param: name.clone(),
                        index: idx,
                        analytic: a,
                        numeric,
                        relative_error: rel,
                    });
                }
            }
        }
    }
    Ok(report)
}
