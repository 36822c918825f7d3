//! Fréchet distance between Gaussian fits of feature sets.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result};

/// Feature extractor for the Fréchet distance.
#[derive(Debug, Clone, PartialEq)]
pub enum Extractor {
    /// Average-pool the `[-1, 1]` image to 8×8 and flatten (64 features).
    Desk,
    /// Inception-v3 pool features. The network is not bundled; compute
    /// features externally and use [`FeatureStats::from_features`].
    Inception { weights: Option<PathBuf> },
}

impl Extractor {
    pub fn parse(id: &str) -> Result<Self> {
        match id {
            "desk" => Ok(Extractor::Desk),
            "inception" => Ok(Extractor::Inception { weights: None }),
            other => Err(Error::Config(format!("unknown feature extractor {other:?} (expected desk or inception)"))),
        }
    }
}

pub const DESK_GRID: usize = 8;

/// One feature row per `S×S` image.
pub fn extract_features(images: &[Vec<f32>], size: usize, extractor: &Extractor) -> Result<Vec<Vec<f64>>> {
    match extractor {
        Extractor::Desk => {
            if size < DESK_GRID || size % DESK_GRID != 0 {
                return Err(Error::Dimension(format!("desk extractor needs S divisible by {DESK_GRID}, got {size}")));
            }
            let cell = size / DESK_GRID;
            images
                .iter()
                .map(|img| {
                    if img.len() != size * size {
                        return Err(Error::Dimension(format!("image of {} pixels, expected {}", img.len(), size * size)));
                    }
                    let mut f = vec![0.0; DESK_GRID * DESK_GRID];
                    for y in 0..size {
                        for x in 0..size {
                            f[(y / cell) * DESK_GRID + x / cell] += img[y * size + x] as f64;
                        }
                    }
                    let area = (cell * cell) as f64;
                    f.iter_mut().for_each(|v| *v /= area);
                    Ok(f)
                })
                .collect()
        }
        Extractor::Inception { weights } => Err(Error::MissingWeights(format!(
            "Inception-v3 features are not computed in-process{}; extract pool features with an external \
             Inception-v3 and pass them as CSV feature files (one row per image), or use the desk extractor",
            weights.as_ref().map(|w| format!(" (weights given: {})", w.display())).unwrap_or_default()
        ))),
    }
}

/// Mean and unbiased covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub n: usize,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FeatureStats {
    pub fn new(n: usize, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Dimension(format!(
                "covariance {}x{} for a mean of length {}",
                cov.nrows(),
                cov.ncols(),
                mean.len()
            )));
        }
        Ok(Self { n, mean, cov })
    }

    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::Contract("covariance needs at least two feature rows".into()));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension("feature rows differ in length".into()));
        }
        let n = rows.len();
        let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
        let mut centred = x;
        for j in 0..d {
            let m = mean[j];
            centred.column_mut(j).add_scalar_mut(-m);
        }
        let cov = centred.transpose() * &centred / (n as f64 - 1.0);
        Ok(Self { n, mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Square root of a symmetric positive semidefinite matrix; negative
/// eigenvalues (numerical noise) are clipped at zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^{1/2})`.
///
/// The trace of `(Σa Σb)^{1/2}` is taken from the symmetric matrix
/// `Σa^{1/2} Σb Σa^{1/2}`, which has the same eigenvalues; eigenvalues are
/// clipped at zero and the result is clamped to be non-negative.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!("feature dimensions differ: {} vs {}", a.dim(), b.dim())));
    }
    let diff = &a.mean - &b.mean;
    let sa = psd_sqrt(&a.cov);
    let inner = &sa * &b.cov * &sa;
    let sym = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(sym).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let d = diff.dot(&diff) + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}
