//! Adaptive-moment optimizer.

use std::collections::HashMap;

use crate::layers::{Grads, Module};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient of decaying parameters.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 8e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 5e-4 }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with per-parameter state keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    state: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, state: HashMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter of `module` that has a gradient.
    pub fn step<M: Module + ?Sized>(&mut self, module: &mut M, grads: &Grads) {
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for p in module.params_mut() {
            let Some(g) = grads.get(&p.name) else { continue };
            let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; p.len()],
                v: vec![0.0; p.len()],
            });
            let decay = if p.decay { c.weight_decay } else { 0.0 };
            for i in 0..p.value.len() {
                let gi = g[i] + decay * p.value[i];
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * gi;
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = st.m[i] / bias1;
                let v_hat = st.v[i] / bias2;
                p.value[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
    }
}
