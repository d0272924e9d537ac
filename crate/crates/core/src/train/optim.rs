//! AdamW with decoupled weight decay and per-parameter step counts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{to_storage, ModelState};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First/second moment estimates of one parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter in `grads`. Values and moments
    /// are rounded to single precision afterwards.
    pub fn step(&mut self, state: &mut ModelState, grads: &BTreeMap<String, Mat>) {
        let c = self.config;
        for (name, grad) in grads {
            let Some(param) = state.params.get_mut(name) else { continue };
            let n = param.data.len();
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                steps: 0,
            });
            mom.steps += 1;
            let t = mom.steps as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            for i in 0..n {
                let g = grad.data[i];
                let m = to_storage(c.beta1 * mom.m[i] + (1.0 - c.beta1) * g);
                let v = to_storage(c.beta2 * mom.v[i] + (1.0 - c.beta2) * g * g);
                mom.m[i] = m;
                mom.v[i] = v;
                let p = param.data[i] * (1.0 - c.learning_rate * c.weight_decay);
                let update = c.learning_rate * (m / bc1) / ((v / bc2).sqrt() + c.eps);
                param.data[i] = to_storage(p - update);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut state = build_model(&ModelConfig::default()).unwrap();
        let name = "hq_decoder.fuse_conv2.bias".to_string();
        let before = state.params[&name].data.clone();
        let mut grads = BTreeMap::new();
        grads.insert(name.clone(), Mat::filled(1, before.len(), 0.5));
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut state, &grads);
        for (a, b) in before.iter().zip(&state.params[&name].data) {
            assert!((a - b - 1e-3).abs() < 1e-8);
        }
        assert_eq!(opt.moments[&name].steps, 1);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut state = build_model(&ModelConfig::default()).unwrap();
        let name = "sam_decoder.mask_token".to_string();
        let before = state.params[&name].data.clone();
        let mut grads = BTreeMap::new();
        grads.insert(name.clone(), Mat::zeros(1, before.len()));
        AdamW::new(AdamWConfig::default()).step(&mut state, &grads);
        for (a, b) in before.iter().zip(&state.params[&name].data) {
            assert!((a * (1.0 - 1e-7) - b).abs() < 1e-6 * a.abs().max(1e-30));
        }
    }
}
