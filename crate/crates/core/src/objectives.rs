//! Reconstruction, adversarial and age-classification objectives, label
//! smoothing, and their assembly into per-network trainable losses.
//!
//! Every objective exists twice: as a plain `f64` function on scores and
//! logits (used for reporting and as a reference), and as a recording graph
//! used by the trainer. Both follow the same conventions:
//!
//! * reconstruction is the mean squared error over all pixels of the batch;
//! * scores are clamped to `[1e-7, 1 - 1e-7]` before any logarithm;
//! * age losses are soft-target cross-entropies of softmax(logits).

use std::collections::BTreeMap;

use bapgan_autograd::{Scalar, Tensor, Var};
use num_traits::Num;
use serde::{Deserialize, Serialize};

use crate::model::{discriminator_graph, encoder_graph, generator_graph, identity_graph, Bound};
use crate::{Error, ModelConfig, Result};

/// Bound applied to discriminator scores before taking logarithms.
pub const SCORE_CLAMP: f64 = 1e-7;

pub const RECON: &str = "recon";
pub const ID_ADV_D: &str = "id_adv_d";
pub const ID_ADV_G: &str = "id_adv_g";
pub const IMG_ADV_D: &str = "img_adv_d";
pub const IMG_ADV_G: &str = "img_adv_g";
pub const AGE_D: &str = "age_d";
pub const AGE_G: &str = "age_g";

/// Form of the encoder/generator side of each adversarial game.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLoss {
    /// `-E[log D(fake)]`.
    #[default]
    NonSaturating,
    /// `E[log(1 - D(fake))]`, the literal min-max term.
    Saturating,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the reconstruction term (λ1).
    pub recon: f64,
    /// Weight of both age-classification terms (λ2).
    pub age: f64,
    /// Weight of the encoder/generator side of both adversarial games.
    #[serde(default = "one")]
    pub adversarial: f64,
    pub generator_loss: GeneratorLoss,
}

fn one() -> f64 {
    1.0
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon: 10_000.0,
            age: 100.0,
            adversarial: 1.0,
            generator_loss: GeneratorLoss::NonSaturating,
        }
    }
}

/// Smooth a one-hot row: every existing neighbour of the hot bin receives
/// `eps`, the hot bin keeps the remainder. Generic so that it can run on
/// exact rationals as well as floats.
pub fn smooth_label<N>(row: &[N], eps: N) -> Result<Vec<N>>
where
    N: Num + Copy + PartialOrd,
{
    let hot: Vec<usize> = row
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != N::zero())
        .map(|(i, _)| i)
        .collect();
    if hot.len() != 1 || row[hot[0]] != N::one() {
        return Err(Error::Contract("age label is not one-hot".into()));
    }
    if eps < N::zero() || eps >= N::one() {
        return Err(Error::Contract("smoothing must lie in [0, 1)".into()));
    }
    let h = hot[0];
    let mut out = vec![N::zero(); row.len()];
    let mut spent = N::zero();
    for n in [h.checked_sub(1), Some(h + 1)].into_iter().flatten() {
        if n < row.len() {
            out[n] = eps;
            spent = spent + eps;
        }
    }
    let kept = N::one() - spent;
    if kept < N::zero() {
        return Err(Error::Contract("smoothing leaves negative mass on the labelled bin".into()));
    }
    out[h] = kept;
    Ok(out)
}

/// Row-wise [`smooth_label`] over a `[B, K]` batch.
pub fn smooth_age_labels<T: Scalar>(labels: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    if labels.shape().len() != 2 {
        return Err(Error::Dimension(format!("labels must be [B, K], got {:?}", labels.shape())));
    }
    let k = labels.dim(1);
    let mut data = Vec::with_capacity(labels.len());
    for row in labels.data().chunks(k) {
        data.extend(smooth_label(row, eps)?);
    }
    Ok(Tensor::new(labels.shape().to_vec(), data)?)
}

/// One-hot `[B, K]` rows for the given bins.
pub fn one_hot<T: Scalar>(bins: &[usize], k: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); bins.len() * k];
    for (i, &b) in bins.iter().enumerate() {
        if b >= k {
            return Err(Error::Range(format!("age bin {b} outside [0, {k})")));
        }
        data[i * k + b] = T::one();
    }
    Ok(Tensor::new(vec![bins.len(), k], data)?)
}

fn to_f64<T: Scalar>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Mean over all pixels of `(x - x')²`.
pub fn reconstruction_loss<T: Scalar>(x: &Tensor<T>, x_rec: &Tensor<T>) -> Result<f64> {
    if x.shape() != x_rec.shape() {
        return Err(Error::Dimension(format!(
            "reconstruction shapes differ: {:?} vs {:?}",
            x.shape(),
            x_rec.shape()
        )));
    }
    let total: f64 = x
        .data()
        .iter()
        .zip(x_rec.data())
        .map(|(&a, &b)| {
            let d = to_f64(a) - to_f64(b);
            d * d
        })
        .sum();
    Ok(total / x.len() as f64)
}

fn clamp_score(s: f64) -> f64 {
    s.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// `(d_loss, g_loss)` of one adversarial game from discriminator scores on
/// real and fake samples.
pub fn adversarial_losses(scores_real: &[f64], scores_fake: &[f64], form: GeneratorLoss) -> (f64, f64) {
    let d = -mean(scores_real.iter().map(|&s| clamp_score(s).ln()))
        - mean(scores_fake.iter().map(|&s| (1.0 - clamp_score(s)).ln()));
    let g = match form {
        GeneratorLoss::NonSaturating => -mean(scores_fake.iter().map(|&s| clamp_score(s).ln())),
        GeneratorLoss::Saturating => mean(scores_fake.iter().map(|&s| (1.0 - clamp_score(s)).ln())),
    };
    (d, g)
}

/// Mean soft-target cross-entropy `-Σ_k t_k log softmax(logits)_k`.
pub fn soft_cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<f64> {
    if logits.shape() != targets.shape() || logits.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "logits {:?} and targets {:?} must both be [B, K]",
            logits.shape(),
            targets.shape()
        )));
    }
    let k = logits.dim(1);
    let rows = logits.data().chunks(k).zip(targets.data().chunks(k)).map(|(l, t)| {
        let l: Vec<f64> = l.iter().map(|&v| to_f64(v)).collect();
        let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        -l.iter().zip(t).map(|(lv, &tv)| to_f64(tv) * (lv - lse)).sum::<f64>()
    });
    Ok(mean(rows))
}

/// `(age_d, age_g)`: cross-entropy of the classifier on real and on
/// generated images against the (possibly smoothed) subject labels.
pub fn age_classification_losses<T: Scalar>(
    logits_real: &Tensor<T>,
    logits_fake: &Tensor<T>,
    targets: &Tensor<T>,
) -> Result<(f64, f64)> {
    Ok((soft_cross_entropy(logits_real, targets)?, soft_cross_entropy(logits_fake, targets)?))
}

/// Per-network losses of one step plus every additive component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub loss_eg: f64,
    pub loss_did: f64,
    pub loss_dimg: f64,
    pub loss_dage: f64,
    pub components: BTreeMap<String, f64>,
    pub weights: LossWeights,
    pub use_dage: bool,
}

impl LossBundle {
    pub fn component(&self, name: &str) -> f64 {
        self.components.get(name).copied().unwrap_or(f64::NAN)
    }

    /// Value of the min-max objective (reconstruction plus the log-likelihood
    /// terms of both games, plus the weighted age terms when enabled).
    pub fn minimax_value(&self) -> f64 {
        let c = |n| self.component(n);
        let mut v = self.weights.recon * c(RECON) - c(ID_ADV_D) - c(IMG_ADV_D);
        if self.use_dage {
            v += self.weights.age * (c(AGE_D) + c(AGE_G));
        }
        v
    }

    pub fn all_finite(&self) -> bool {
        [self.loss_eg, self.loss_did, self.loss_dimg, self.loss_dage].iter().all(|v| v.is_finite())
            && self.components.values().all(|v| v.is_finite())
    }

    pub fn describe(&self) -> String {
        let mut s = format!(
            "loss_eg={} loss_did={} loss_dimg={} loss_dage={}",
            self.loss_eg, self.loss_did, self.loss_dimg, self.loss_dage
        );
        for (k, v) in &self.components {
            s.push_str(&format!(" {k}={v}"));
        }
        s
    }
}

/// Assemble the bundle from named components, checking that exactly the
/// components required by the active flags are present.
pub fn compose_losses(config: &ModelConfig, weights: &LossWeights, parts: &BTreeMap<String, f64>) -> Result<LossBundle> {
    let mut required = vec![RECON, ID_ADV_D, ID_ADV_G, IMG_ADV_D, IMG_ADV_G];
    if config.use_dage {
        required.extend([AGE_D, AGE_G]);
    } else if parts.contains_key(AGE_D) || parts.contains_key(AGE_G) {
        return Err(Error::Contract("age components supplied but the age discriminator is disabled".into()));
    }
    for name in &required {
        if !parts.contains_key(*name) {
            return Err(Error::Contract(format!("missing loss component {name}")));
        }
    }
    if let Some(extra) = parts.keys().find(|k| !required.contains(&k.as_str())) {
        return Err(Error::Contract(format!("unknown loss component {extra}")));
    }
    let p = |n: &str| parts[n];
    let w = weights.adversarial;
    let mut loss_eg = weights.recon * p(RECON) + w * p(ID_ADV_G) + w * p(IMG_ADV_G);
    let mut loss_dage = 0.0;
    if config.use_dage {
        loss_eg += weights.age * p(AGE_G);
        loss_dage = weights.age * p(AGE_D);
    }
    Ok(LossBundle {
        loss_eg,
        loss_did: p(ID_ADV_D),
        loss_dimg: p(IMG_ADV_D),
        loss_dage,
        components: parts.clone(),
        weights: *weights,
        use_dage: config.use_dage,
    })
}

/// Which part of the objective a graph is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossScope {
    All,
    /// Discriminator-side terms (needs real and fake passes through both
    /// discriminators).
    Discriminators,
    /// Encoder/generator-side terms only.
    EncoderGenerator,
}

/// Recording losses of one batch.
pub struct LossVars<'g, T: Scalar> {
    pub loss_eg: Option<Var<'g, T>>,
    pub loss_did: Option<Var<'g, T>>,
    pub loss_dimg: Option<Var<'g, T>>,
    pub loss_dage: Option<Var<'g, T>>,
    pub components: BTreeMap<&'static str, Var<'g, T>>,
    /// Age logits on the real batch, when computed.
    pub logits_real: Option<Var<'g, T>>,
}

impl<'g, T: Scalar> LossVars<'g, T> {
    /// Component values as `f64`.
    pub fn component_values(&self) -> BTreeMap<String, f64> {
        self.components.iter().map(|(k, v)| (k.to_string(), to_f64(v.item()))).collect()
    }

    /// Sum of the discriminator-side losses (`D_img` and `D_age` share an update).
    pub fn image_discriminator_total(&self) -> Option<Var<'g, T>> {
        match (self.loss_dimg, self.loss_dage) {
            (Some(a), Some(b)) => a.add(b).ok(),
            (a, None) => a,
            (None, b) => b,
        }
    }
}

fn scalar<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}

/// `-mean log s` with clamping.
fn neg_mean_log<'g, T: Scalar>(s: Var<'g, T>) -> Var<'g, T> {
    s.ln_clamped(scalar(SCORE_CLAMP), scalar(1.0 - SCORE_CLAMP)).mean_all().scale(-T::one())
}

/// `mean log(1 - s)` with clamping.
fn mean_log_one_minus<'g, T: Scalar>(s: Var<'g, T>) -> Var<'g, T> {
    s.rsub_scalar(T::one())
        .ln_clamped(scalar(SCORE_CLAMP), scalar(1.0 - SCORE_CLAMP))
        .mean_all()
}

fn generator_term<'g, T: Scalar>(fake: Var<'g, T>, form: GeneratorLoss) -> Var<'g, T> {
    match form {
        GeneratorLoss::NonSaturating => neg_mean_log(fake),
        GeneratorLoss::Saturating => mean_log_one_minus(fake),
    }
}

fn soft_ce_graph<'g, T: Scalar>(logits: Var<'g, T>, targets: &Tensor<T>) -> Result<Var<'g, T>> {
    let batch = logits.shape()[0];
    let inv = -T::one() / T::from_usize(batch).expect("batch");
    Ok(logits.log_softmax_rows().mul_const(targets)?.sum_all().scale(inv))
}

/// Build the objective for one batch on `b`'s graph.
///
/// `labels` are the labels fed to every conditioned network and used as the
/// age-classification target (already smoothed when smoothing is enabled).
/// `prior` holds samples `z★` from the uniform prior.
pub fn build_losses<'g, T: Scalar>(
    b: &Bound<'g, T>,
    x: &Tensor<T>,
    labels: &Tensor<T>,
    prior: &Tensor<T>,
    weights: &LossWeights,
    scope: LossScope,
) -> Result<LossVars<'g, T>> {
    let cfg = b.config().clone();
    let g = b.graph();
    let want_d = scope != LossScope::EncoderGenerator;
    let want_g = scope != LossScope::Discriminators;
    let mut components = BTreeMap::new();

    let x_var = g.constant(x.clone());
    let z = encoder_graph(b, x_var)?;
    let labels_var = g.constant(labels.clone());
    let x_rec = generator_graph(b, z, labels_var)?;

    let id_fake = identity_graph(b, z)?;
    let fake = discriminator_graph(b, x_rec, labels)?;
    let mut logits_real = None;
    let (mut loss_did, mut loss_dimg, mut loss_dage, mut loss_eg) = (None, None, None, None);

    if want_d {
        let id_real = identity_graph(b, g.constant(prior.clone()))?;
        let id_adv_d = neg_mean_log(id_real).sub(mean_log_one_minus(id_fake))?;
        let real = discriminator_graph(b, x_var, labels)?;
        let img_adv_d = neg_mean_log(real.realness).sub(mean_log_one_minus(fake.realness))?;
        components.insert(ID_ADV_D, id_adv_d);
        components.insert(IMG_ADV_D, img_adv_d);
        loss_did = Some(id_adv_d);
        loss_dimg = Some(img_adv_d);
        if let Some(lr) = real.age_logits {
            let age_d = soft_ce_graph(lr, labels)?;
            components.insert(AGE_D, age_d);
            loss_dage = Some(age_d.scale(scalar(weights.age)));
            logits_real = Some(lr);
        }
    }
    if want_g {
        let recon = x_rec.sub(x_var)?.square().mean_all();
        let id_adv_g = generator_term(id_fake, weights.generator_loss);
        let img_adv_g = generator_term(fake.realness, weights.generator_loss);
        components.insert(RECON, recon);
        components.insert(ID_ADV_G, id_adv_g);
        components.insert(IMG_ADV_G, img_adv_g);
        let w = scalar(weights.adversarial);
        let mut total = recon
            .scale(scalar(weights.recon))
            .add(id_adv_g.scale(w))?
            .add(img_adv_g.scale(w))?;
        if let Some(lf) = fake.age_logits {
            let age_g = soft_ce_graph(lf, labels)?;
            components.insert(AGE_G, age_g);
            total = total.add(age_g.scale(scalar(weights.age)))?;
        }
        loss_eg = Some(total);
    }
    debug_assert_eq!(cfg.use_dage, fake.age_logits.is_some());
    Ok(LossVars {
        loss_eg,
        loss_did,
        loss_dimg,
        loss_dage,
        components,
        logits_real,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_reproduces_reference_rows() {
        let mid = smooth_label(&[0.0, 0.0, 1.0, 0.0, 0.0], 0.2).unwrap();
        assert_eq!(mid, vec![0.0, 0.2, 0.6, 0.2, 0.0]);
        let first = smooth_label(&[1.0, 0.0, 0.0, 0.0, 0.0], 0.2).unwrap();
        assert_eq!(first, vec![0.8, 0.2, 0.0, 0.0, 0.0]);
        let last = smooth_label(&[0.0, 0.0, 0.0, 0.0, 1.0], 0.2).unwrap();
        assert_eq!(last, vec![0.0, 0.0, 0.0, 0.2, 0.8]);
    }

    #[test]
    fn zero_smoothing_is_identity() {
        let row = [0.0, 1.0, 0.0];
        assert_eq!(smooth_label(&row, 0.0).unwrap(), row.to_vec());
    }

    #[test]
    fn smoothing_rejects_soft_input() {
        assert!(matches!(smooth_label(&[0.5, 0.5, 0.0], 0.2), Err(Error::Contract(_))));
        assert!(matches!(smooth_label(&[0.0, 0.0, 0.0], 0.2), Err(Error::Contract(_))));
        assert!(matches!(smooth_label(&[0.0, 1.0, 0.0], 0.6), Err(Error::Contract(_))));
    }

    #[test]
    fn reconstruction_extremes() {
        let a = Tensor::<f32>::full(vec![2, 1, 4, 4], 1.0);
        let b = Tensor::<f32>::full(vec![2, 1, 4, 4], -1.0);
        assert_eq!(reconstruction_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(reconstruction_loss(&a, &b).unwrap(), 4.0);
        assert!(matches!(
            reconstruction_loss(&a, &Tensor::full(vec![1, 1, 4, 4], 0.0)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn adversarial_at_half() {
        let (d, g) = adversarial_losses(&[0.5, 0.5], &[0.5, 0.5], GeneratorLoss::NonSaturating);
        assert!((d - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_discriminator_has_near_zero_loss() {
        let (d, _) = adversarial_losses(&[1.0, 1.0], &[0.0, 0.0], GeneratorLoss::NonSaturating);
        assert!(d >= 0.0 && d < 1e-6, "{d}");
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::<f64>::zeros(vec![3, 5]);
        let targets = smooth_age_labels(&one_hot::<f64>(&[0, 2, 4], 5).unwrap(), 0.2).unwrap();
        let ce = soft_cross_entropy(&logits, &targets).unwrap();
        assert!((ce - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_at_target_is_entropy() {
        let p = [0.0, 0.2, 0.6, 0.2, 0.0];
        // log-probabilities reproducing p; zero-probability bins get a very negative logit
        let logits: Vec<f64> = p.iter().map(|&v: &f64| if v > 0.0 { v.ln() } else { -1e3 }).collect();
        let ce = soft_cross_entropy(
            &Tensor::new(vec![1, 5], logits).unwrap(),
            &Tensor::new(vec![1, 5], p.to_vec()).unwrap(),
        )
        .unwrap();
        assert!((ce - 0.950_270_539_2).abs() < 1e-9, "{ce}");
    }

    #[test]
    fn compose_gates_age_terms_on_flags() {
        let caae = ModelConfig::desk().with_row(crate::AblationRow::Caae);
        let mut parts: BTreeMap<String, f64> = [RECON, ID_ADV_D, ID_ADV_G, IMG_ADV_D, IMG_ADV_G]
            .iter()
            .map(|k| (k.to_string(), 0.0))
            .collect();
        parts.insert(RECON.into(), 0.1);
        let b = compose_losses(&caae, &LossWeights::default(), &parts).unwrap();
        assert!((b.loss_eg - 1000.0).abs() < 1e-9);
        parts.insert(AGE_D.into(), 1.0);
        assert!(matches!(
            compose_losses(&caae, &LossWeights::default(), &parts),
            Err(Error::Contract(_))
        ));
        let full = ModelConfig::desk();
        parts.remove(AGE_D);
        assert!(matches!(
            compose_losses(&full, &LossWeights::default(), &parts),
            Err(Error::Contract(_))
        ));
    }
}
