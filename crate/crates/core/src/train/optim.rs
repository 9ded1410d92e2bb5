//! AdamW with decoupled weight decay and an exponential learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::TrainError;
use crate::net::NetworkWeights;

/// Learning rate after `step` optimizer steps out of `total_steps`, decaying
/// geometrically from `initial` to `initial * final_factor`.
pub fn learning_rate(initial: f64, final_factor: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps <= 1 {
        return initial;
    }
    let frac = step.min(total_steps - 1) as f64 / (total_steps - 1) as f64;
    initial * final_factor.powf(frac)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Moment estimates for a list of flat tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: usize,
}

impl AdamW {
    pub fn new(config: AdamWConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn for_weights(config: AdamWConfig, weights: &NetworkWeights) -> Self {
        let sizes: Vec<usize> = weights.tensors().iter().map(|t| t.len()).collect();
        Self::new(config, &sizes)
    }

    /// One update of every tensor. Returns the index of the first tensor
    /// holding a non-finite gradient without touching any parameter.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<(), usize> {
        if let Some(bad) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(bad);
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let decay = 1.0 - lr * c.weight_decay;
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }

    pub fn step_weights(
        &mut self,
        weights: &mut NetworkWeights,
        grad: &NetworkWeights,
        lr: f64,
    ) -> Result<(), TrainError> {
        let names = grad.tensor_names();
        let grads = grad.tensors();
        let mut params = weights.tensors_mut();
        self.update(&mut params, &grads, lr)
            .map_err(|k| TrainError::NonFiniteGradient { step: self.step + 1, tensor: names[k].clone() })
    }
}
