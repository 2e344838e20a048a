//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{CcpError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one set of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        AdamState {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Applies one update. `grads[i]` of `None` leaves parameter `i` and its
    /// moments untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(CcpError::shape(
                "adam",
                format!(
                    "{} parameters and {} gradients for {} slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != params[i].shape() {
                    return Err(CcpError::shape(
                        "adam",
                        format!("gradient {:?} for parameter {:?}", g.shape(), params[i].shape()),
                    ));
                }
                if !g.is_finite() {
                    return Err(CcpError::NonFinite { op: "adam" });
                }
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((p, &gj), (mj, vj)) in params[i]
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mj = beta1 * *mj + (1.0 - beta1) * gj;
                *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
                let m_hat = *mj / c1;
                let v_hat = *vj / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut p = Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(&[1, 2]);
        let mut adam = AdamState::new(AdamConfig::default(), &[2]);
        adam.step(&mut [&mut p], &[Some(&g)]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let g = Tensor::from_rows(&[vec![3.0, -0.5]]).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), &[2]);
        adam.step(&mut [&mut p], &[Some(&g)]).unwrap();
        assert!((p.data()[0] + 1e-3).abs() < 1e-9);
        assert!((p.data()[1] - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn two_hundred_steps_on_a_square() {
        // Scalar simulation of the same recurrence as the oracle.
        let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
        let (mut x, mut m, mut v) = (1.0f64, 0.0, 0.0);
        let mut p = Tensor::scalar(1.0);
        let mut adam = AdamState::new(AdamConfig { lr, ..AdamConfig::default() }, &[1]);
        for t in 1..=200 {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            let grad = p.map(|y| 2.0 * y);
            adam.step(&mut [&mut p], &[Some(&grad)]).unwrap();
        }
        assert!(x.abs() < 0.05, "{}", x);
        assert!((p.data()[0] - x).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let mut p = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let g = Tensor::from_rows(&[vec![f64::INFINITY]]).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), &[1]);
        assert!(adam.step(&mut [&mut p], &[Some(&g)]).is_err());
        assert_eq!(p.data()[0], 1.0);
    }

    #[test]
    fn skipped_slot_untouched() {
        let mut a = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let mut b = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let g = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), &[1, 1]);
        adam.step(&mut [&mut a, &mut b], &[Some(&g), None]).unwrap();
        assert_ne!(a.data()[0], 1.0);
        assert_eq!(b.data()[0], 1.0);
    }
}
