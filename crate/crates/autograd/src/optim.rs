use crate::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> AdamMoments<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }
}

/// Adam with bias correction. The step counter is owned by the caller so a
/// single counter can drive several parameter groups.
#[derive(Debug, Clone, Copy)]
pub struct Adam {
    pub config: AdamConfig,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config }
    }

    /// Apply one update for step `t` (1-based).
    pub fn step<T: Scalar>(&self, t: u64, param: &mut Tensor<T>, grad: &Tensor<T>, moments: &mut AdamMoments<T>) {
        assert_eq!(param.len(), grad.len(), "adam: grad length");
        let c = &self.config;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powf(t as f64));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powf(t as f64));
        let lr = T::from_f64_lossy(c.lr);
        let eps = T::from_f64_lossy(c.eps);
        let one = T::one();
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(moments.m.iter_mut())
            .zip(moments.v.iter_mut())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first update is lr * sign(g).
        let adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        let mut p = Tensor::new(vec![2], vec![1.0f64, -1.0]).unwrap();
        let g = Tensor::new(vec![2], vec![3.0, -0.5]).unwrap();
        let mut m = AdamMoments::zeros(2);
        adam.step(1, &mut p, &g, &mut m);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let adam = Adam::new(AdamConfig {
            lr: 0.0,
            ..Default::default()
        });
        let mut p = Tensor::new(vec![3], vec![0.5f32, 0.25, -2.0]).unwrap();
        let before = p.clone();
        let mut m = AdamMoments::zeros(3);
        adam.step(1, &mut p, &Tensor::full(vec![3], 7.0), &mut m);
        assert_eq!(p, before);
    }
}
