use serde::{Deserialize, Serialize};

use super::{Gradients, NeuralError, QNetwork};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
}

fn default_lr() -> f64 {
    0.001
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: default_lr(), beta1: default_beta1(), beta2: default_beta2(), epsilon: default_eps() }
    }
}

/// Bias-corrected Adam with moments shaped like the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, net: &QNetwork) -> Self {
        let zeros: Vec<Vec<f64>> = net.tensors().map(|t| vec![0.0; t.len()]).collect();
        Self { config, step_count: 0, m: zeros.clone(), v: zeros }
    }

    /// Apply one update in place and increment the step count.
    pub fn step(&mut self, net: &mut QNetwork, grads: &Gradients) -> Result<(), NeuralError> {
        let grad_tensors: Vec<&Vec<f64>> = grads.layers.iter().flat_map(|(w, b)| [w, b]).collect();
        let shapes_ok = grad_tensors.len() == self.m.len()
            && net.tensors().zip(&grad_tensors).zip(&self.m).all(|((p, g), m)| p.len() == g.len() && p.len() == m.len());
        if !shapes_ok {
            return Err(NeuralError::ShapeMismatch {
                expected: format!("{} parameter tensors", self.m.len()),
                got: format!("{} gradient tensors", grad_tensors.len()),
            });
        }
        self.step_count += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in net.tensors_mut().zip(grad_tensors).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
