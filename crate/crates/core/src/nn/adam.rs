use serde::{Deserialize, Serialize};

use crate::error::{PonError, Result};

/// Adam with bias-corrected moments over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First moment (mean of gradients).
    pub m: Vec<f64>,
    /// Second moment (mean of squared gradients).
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(PonError::invalid(format!(
                "Adam shape mismatch: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut adam = AdamState::new(3, 1e-3);
        let mut p = vec![1.0, -2.0, 0.5];
        adam.update(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [3.0, -0.02, 1e4] {
            let mut adam = AdamState::new(1, 1e-4);
            let mut p = vec![0.0];
            adam.update(&mut p, &[g]).unwrap();
            let expected = -1e-4 * g / (g.abs() + 1e-8);
            assert!((p[0] - expected).abs() < 1e-18);
            assert!((p[0] + 1e-4 * g.signum()).abs() < 1e-4 * 1e-8 / g.abs() + 1e-18);
        }
    }

    #[test]
    fn descends_a_quadratic() {
        // f(x) = (x − 3)², f'(x) = 2(x − 3)
        let mut adam = AdamState::new(1, 0.1);
        let mut x = vec![0.0];
        let f = |x: f64| (x - 3.0) * (x - 3.0);
        let mut last = f(x[0]);
        for _ in 0..2 {
            let g = 2.0 * (x[0] - 3.0);
            adam.update(&mut x, &[g]).unwrap();
            let now = f(x[0]);
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut adam = AdamState::new(2, 1e-3);
        assert!(adam.update(&mut [0.0; 3], &[0.0; 3]).is_err());
    }
}
