//! Adam without weight decay.
//!
//! A step first computes the full update vector and then adds it to the
//! parameters, so masking the update (see [`crate::surgery`]) only zeroes
//! entries and an all-true mask reproduces the unmasked step exactly.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, n: usize) -> Self {
        Adam {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Advances the moment estimates and returns the update to add to the
    /// parameters.
    pub fn delta(&mut self, grad: &[f64]) -> Vec<f64> {
        assert_eq!(grad.len(), self.m.len(), "gradient length mismatch");
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        grad.iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|(&g, (m, v))| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                -lr * m_hat / (v_hat.sqrt() + eps)
            })
            .collect()
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let delta = self.delta(grad);
        params.iter_mut().zip(&delta).for_each(|(p, d)| *p += d);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        // with bias correction the first update is -lr * g / (|g| + eps)
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), 3);
        let d = adam.delta(&[2.0, -0.5, 0.0]);
        assert!((d[0] + 0.1 * 2.0 / (2.0 + 1e-8)).abs() < 1e-15);
        assert!((d[1] - 0.1 * 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
        assert_eq!(d[2], 0.0);
    }

    #[test]
    fn second_step_oracle() {
        let mut adam = Adam::new(AdamConfig::with_lr(1.0), 1);
        adam.delta(&[1.0]);
        let d = adam.delta(&[3.0])[0];
        // m = 0.9*0.1 + 0.1*3 = 0.39, v = 0.999*0.001 + 0.001*9 = 0.009999
        let m_hat = 0.39 / (1.0 - 0.81);
        let v_hat: f64 = 0.009_999 / (1.0 - 0.998_001);
        assert!((d + m_hat / (v_hat.sqrt() + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut adam = Adam::new(AdamConfig::with_lr(0.05), 2);
        let mut x = vec![3.0, -2.0];
        for _ in 0..2000 {
            let g = vec![2.0 * x[0], 2.0 * x[1]];
            adam.step(&mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2));
    }
}
