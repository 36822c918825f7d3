//! Power-iteration spectral normalization.

use bapgan_autograd::{Scalar, Tensor};

use crate::{Error, Result};

/// Persistent singular-vector estimates for one normalized weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState<T> {
    /// Left singular vector estimate, length = rows, unit norm.
    pub u: Vec<T>,
    /// Right singular vector estimate, length = cols.
    pub v: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct SpectralNormalized<T> {
    pub weight: Tensor<T>,
    pub u: Vec<T>,
    pub v: Vec<T>,
    pub sigma: T,
}

/// Smallest admissible singular-value estimate; a zero matrix normalizes to
/// zero instead of dividing by zero.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Divide `weight` (viewed as `rows × rest`) by its top singular value as
/// estimated by `n_iter` power iterations starting from `u`.
pub fn spectral_normalize<T: Scalar>(weight: &Tensor<T>, u: &[T], n_iter: usize) -> Result<SpectralNormalized<T>> {
    if n_iter == 0 {
        return Err(Error::Config("spectral normalization needs at least one power iteration".into()));
    }
    let rows = weight.shape().first().copied().unwrap_or(0);
    if rows == 0 || u.len() != rows {
        return Err(Error::Dimension(format!(
            "u has length {} but weight {:?} has {rows} rows",
            u.len(),
            weight.shape()
        )));
    }
    let norm = l2(u).to_f64().unwrap_or(f64::NAN);
    let tol = if std::mem::size_of::<T>() == 4 { 1e-4 } else { 1e-9 };
    if (norm - 1.0).abs() > tol {
        return Err(Error::Contract(format!("u must have unit norm, got {norm}")));
    }
    let cols = weight.len() / rows;
    let mut state = SpectralState {
        u: u.to_vec(),
        v: vec![T::zero(); cols],
    };
    let sigma = power_iterate(weight.data(), &mut state, n_iter);
    let floor = T::from_f64_lossy(SIGMA_FLOOR);
    let sigma = sigma.max(floor);
    Ok(SpectralNormalized {
        weight: weight.map(|w| w / sigma),
        u: state.u,
        v: state.v,
        sigma,
    })
}

/// Runs `n_iter` rounds of `v ← Wᵀu/‖Wᵀu‖, u ← Wv/‖Wv‖` and returns
/// `uᵀWv`. Vectors are left unchanged when a product vanishes.
pub(crate) fn power_iterate<T: Scalar>(w: &[T], state: &mut SpectralState<T>, n_iter: usize) -> T {
    let rows = state.u.len();
    let cols = w.len() / rows;
    state.v.resize(cols, T::zero());
    for _ in 0..n_iter {
        let mut v = vec![T::zero(); cols];
        for (i, &ui) in state.u.iter().enumerate() {
            for (vj, &wij) in v.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
                *vj += wij * ui;
            }
        }
        if normalize(&mut v) {
            state.v = v;
        } else {
            state.v.iter_mut().for_each(|x| *x = T::zero());
            break;
        }
        let mut u = matvec(w, &state.v, rows, cols);
        if normalize(&mut u) {
            state.u = u;
        } else {
            break;
        }
    }
    let wv = matvec(w, &state.v, rows, cols);
    state.u.iter().zip(&wv).map(|(&a, &b)| a * b).sum()
}

fn matvec<T: Scalar>(w: &[T], v: &[T], rows: usize, cols: usize) -> Vec<T> {
    (0..rows)
        .map(|i| w[i * cols..(i + 1) * cols].iter().zip(v).map(|(&a, &b)| a * b).sum())
        .collect()
}

pub(crate) fn l2<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

fn normalize<T: Scalar>(v: &mut [T]) -> bool {
    let n = l2(v);
    if n <= T::from_f64_lossy(SIGMA_FLOOR) || !n.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(n: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 * 0.1).collect();
        let s = l2(&v);
        v.into_iter().map(|x| x / s).collect()
    }

    #[test]
    fn diagonal_matrix_converges_to_largest_entry() {
        let w = Tensor::new(vec![2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let out = spectral_normalize(&w, &unit(2), 60).unwrap();
        assert!((out.sigma - 3.0).abs() < 1e-9);
        assert!((out.weight.data()[0] - 1.0).abs() < 1e-9);
        assert!((out.weight.data()[3] - 1.0 / 3.0).abs() < 1e-9);
        assert!((l2(&out.u) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_is_a_fixed_point() {
        let w = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let out = spectral_normalize(&w, &unit(3), 1).unwrap();
        assert!((out.sigma - 1.0).abs() < 1e-12);
        for (a, b) in out.weight.data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_matrix_floors_sigma_and_yields_zero() {
        let w = Tensor::<f64>::zeros(vec![2, 3]);
        let u = unit(2);
        let out = spectral_normalize(&w, &u, 5).unwrap();
        assert_eq!(out.sigma, SIGMA_FLOOR);
        assert!(out.weight.data().iter().all(|&x| x == 0.0));
        assert_eq!(out.u, u);
    }

    #[test]
    fn rejects_non_unit_start_and_zero_iterations() {
        let w = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(matches!(spectral_normalize(&w, &[1.0, 1.0], 3), Err(Error::Contract(_))));
        assert!(matches!(spectral_normalize(&w, &unit(2), 0), Err(Error::Config(_))));
        assert!(matches!(spectral_normalize(&w, &unit(3), 1), Err(Error::Dimension(_))));
    }
}
