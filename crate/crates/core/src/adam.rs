//! Adam optimizer over the flat parameter vector, with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state: first/second moment vectors and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(hyper: AdamHyper, num_params: usize) -> Self {
        Self { hyper, step: 0, m: vec![0.0; num_params], v: vec![0.0; num_params] }
    }

    /// One update in place. Rejects non-finite gradients before touching any
    /// state, naming the offending layer.
    pub fn step(&mut self, theta: &mut ParamVector, grad: &ParamVector) -> Result<()> {
        if theta.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Structural(format!(
                "optimizer state sized for {} parameters, got theta {} / grad {}",
                self.m.len(),
                theta.len(),
                grad.len()
            )));
        }
        if let Some((layer, idx)) = grad.first_non_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient in layer {:?} (flat index {})",
                layer, idx
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powf(t);
        let bc2 = 1.0 - h.beta2.powf(t);
        for k in 0..theta.len() {
            let g = grad.values[k];
            self.m[k] = h.beta1 * self.m[k] + (1.0 - h.beta1) * g;
            self.v[k] = h.beta2 * self.v[k] + (1.0 - h.beta2) * g * g;
            let m_hat = self.m[k] / bc1;
            let v_hat = self.v[k] / bc2;
            theta.values[k] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamLayout;
    use std::sync::Arc;

    fn one_param() -> (ParamVector, ParamVector) {
        let layout = Arc::new(ParamLayout::new(&[("w", (1, 1))]));
        let theta = ParamVector::from_values(layout.clone(), vec![0.0]).unwrap();
        let grad = ParamVector::from_values(layout, vec![1.0]).unwrap();
        (theta, grad)
    }

    #[test]
    fn first_step_moves_by_lr_over_one_plus_eps() {
        // With g = 1: m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
        let (mut theta, grad) = one_param();
        let hyper = AdamHyper { lr: 0.1, ..AdamHyper::default() };
        let mut adam = AdamState::new(hyper, 1);
        adam.step(&mut theta, &grad).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((theta.values[0] - expected).abs() < 1e-15);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn constant_gradient_keeps_unit_scaled_steps() {
        // For constant gradients m_hat / sqrt(v_hat) stays 1, so each step
        // moves by about lr regardless of the gradient's magnitude.
        let (mut theta, mut grad) = one_param();
        grad.values[0] = 250.0;
        let mut adam = AdamState::new(AdamHyper { lr: 0.01, ..AdamHyper::default() }, 1);
        for _ in 0..5 {
            adam.step(&mut theta, &grad).unwrap();
        }
        assert!((theta.values[0] + 5.0 * 0.01).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_is_a_numeric_error() {
        let (mut theta, mut grad) = one_param();
        grad.values[0] = f64::INFINITY;
        let mut adam = AdamState::new(AdamHyper::default(), 1);
        let err = adam.step(&mut theta, &grad).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        // State must be untouched after a rejected step.
        assert_eq!(adam.step, 0);
        assert_eq!(theta.values[0], 0.0);
    }

    #[test]
    fn size_mismatch_is_a_structural_error() {
        let (mut theta, grad) = one_param();
        let mut adam = AdamState::new(AdamHyper::default(), 2);
        assert!(adam.step(&mut theta, &grad).is_err());
    }
}
