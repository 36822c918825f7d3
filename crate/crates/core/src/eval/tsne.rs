//! Exact t-SNE with per-point bandwidth search, early exaggeration and a
//! momentum schedule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub steps: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_steps: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    /// Target precision of each point's conditional entropy (nats).
    pub entropy_tolerance: f64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 50.0,
            steps: 500,
            seed: 0,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_steps: 100,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            entropy_tolerance: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Affinities {
    /// Row-major `n×n` conditional probabilities `p_{j|i}`.
    pub conditional: Vec<f64>,
    /// Entropy (nats) of every row.
    pub entropies: Vec<f64>,
    /// Gaussian precision `1 / (2σ_i²)` of every row.
    pub betas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding2D {
    /// Centred coordinates, one pair per input row.
    pub points: Vec<[f64; 2]>,
    pub affinities: Affinities,
}

fn squared_distances(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Row `i` of `p_{j|i}` at precision `beta` and its entropy.
fn row_at(dist: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    // shift by the smallest distance for numerical range
    let min = dist
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for (j, &d) in dist.iter().enumerate() {
        out[j] = if j == i { 0.0 } else { (-(d - min) * beta).exp() };
        sum += out[j];
    }
    let mut h = 0.0;
    for (j, &d) in dist.iter().enumerate() {
        out[j] /= sum;
        if j != i && out[j] > 0.0 {
            h += beta * (d - min) * out[j];
        }
    }
    h + sum.ln()
}

/// Conditional affinities whose rows have entropy `ln(perplexity)`.
pub fn affinities(x: &[Vec<f64>], perplexity: f64, tolerance: f64) -> Result<Affinities> {
    let n = x.len();
    if !(perplexity > 0.0) || n as f64 <= 3.0 * perplexity {
        return Err(Error::Config(format!(
            "perplexity {perplexity} needs more than {} points, got {n}",
            (3.0 * perplexity).floor()
        )));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Contract("t-SNE input must be finite".into()));
    }
    let dist = squared_distances(x);
    let target = perplexity.ln();
    let mut conditional = vec![0.0; n * n];
    let mut entropies = vec![0.0; n];
    let mut betas = vec![1.0; n];
    for i in 0..n {
        let row = &dist[i * n..(i + 1) * n];
        let out = &mut conditional[i * n..(i + 1) * n];
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        let mut beta = 1.0;
        let mut h = row_at(row, i, beta, out);
        for _ in 0..200 {
            if (h - target).abs() < tolerance {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
            h = row_at(row, i, beta, out);
        }
        entropies[i] = h;
        betas[i] = beta;
    }
    Ok(Affinities {
        conditional,
        entropies,
        betas,
    })
}

/// Embed the rows of `x` in two dimensions.
pub fn tsne_embed(x: &[Vec<f64>], config: &TsneConfig) -> Result<Embedding2D> {
    let aff = affinities(x, config.perplexity, config.entropy_tolerance)?;
    let n = x.len();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = ((aff.conditional[i * n + j] + aff.conditional[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![[0.0; 2]; n];
    for step in 0..config.steps {
        let exaggeration = if step < config.exaggeration_steps { config.early_exaggeration } else { 1.0 };
        let momentum = if step < config.momentum_switch { config.initial_momentum } else { config.final_momentum };
        let mut total = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let v = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = v;
                num[j * n + i] = v;
                total += 2.0 * v;
            }
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = (num[i * n + j] / total).max(1e-12);
                let m = (exaggeration * p[i * n + j] - q) * num[i * n + j];
                g[0] += m * (y[i][0] - y[j][0]);
                g[1] += m * (y[i][1] - y[j][1]);
            }
            grad[i] = [4.0 * g[0], 4.0 * g[1]];
        }
        for i in 0..n {
            for d in 0..2 {
                let same_sign = (grad[i][d] > 0.0) == (update[i][d] > 0.0);
                gains[i][d] = if same_sign { gains[i][d] * 0.8 } else { gains[i][d] + 0.2 };
                gains[i][d] = gains[i][d].max(0.01);
                update[i][d] = momentum * update[i][d] - config.learning_rate * gains[i][d] * grad[i][d];
                y[i][d] += update[i][d];
            }
        }
        centre(&mut y);
    }
    centre(&mut y);
    Ok(Embedding2D { points: y, affinities: aff })
}

fn centre(y: &mut [[f64; 2]]) {
    let n = y.len() as f64;
    let mx = y.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = y.iter().map(|p| p[1]).sum::<f64>() / n;
    for p in y.iter_mut() {
        p[0] -= mx;
        p[1] -= my;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn too_few_points_is_a_configuration_error() {
        let x = vec![vec![0.0, 1.0]; 150];
        assert!(matches!(affinities(&x, 50.0, 1e-5), Err(Error::Config(_))));
    }

    #[test]
    fn entropies_hit_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<Vec<f64>> = (0..160).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let a = affinities(&x, 50.0, 1e-5).unwrap();
        for h in &a.entropies {
            assert!((h - 50f64.ln()).abs() < 1e-3, "{h}");
        }
        for i in 0..160 {
            let s: f64 = a.conditional[i * 160..(i + 1) * 160].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
