//! Optimizers keyed by parameter name so their state survives a checkpoint
//! round-trip. Frozen parameters are never touched.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamTree, SlotMut, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Adam { config: AdamConfig, step: u64, first: BTreeMap<String, Tensor>, second: BTreeMap<String, Tensor> },
    Sgd { config: SgdConfig, velocity: BTreeMap<String, Tensor> },
}

impl Optimizer {
    pub fn adam(config: AdamConfig) -> Self {
        Self::Adam { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn sgd(config: SgdConfig) -> Self {
        Self::Sgd { config, velocity: BTreeMap::new() }
    }

    /// Applies one update with learning rate `lr` to every trainable parameter
    /// of `model`.
    pub fn step<T: ParamTree + ?Sized>(&mut self, model: &mut T, lr: f64) {
        if let Self::Adam { step, .. } = self {
            *step += 1;
        }
        match self {
            Self::Adam { config, step, first, second } => {
                let t = *step as i32;
                let bc1 = 1.0 - config.beta1.powi(t);
                let bc2 = 1.0 - config.beta2.powi(t);
                let c = *config;
                model.visit_state_mut("", &mut |name, slot| {
                    let SlotMut::Param(p) = slot else { return };
                    if !p.trainable {
                        return;
                    }
                    let m = first.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.value.raw_dim()));
                    let v = second.entry(name).or_insert_with(|| Tensor::zeros(p.value.raw_dim()));
                    ndarray::Zip::from(&mut p.value).and(m).and(v).and(&p.grad).for_each(|w, m, v, &g| {
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *w -= lr * mhat / (vhat.sqrt() + c.eps);
                    });
                });
            }
            Self::Sgd { config, velocity } => {
                let c = *config;
                model.visit_state_mut("", &mut |name, slot| {
                    let SlotMut::Param(p) = slot else { return };
                    if !p.trainable {
                        return;
                    }
                    let buf = velocity.entry(name).or_insert_with(|| Tensor::zeros(p.value.raw_dim()));
                    ndarray::Zip::from(&mut p.value).and(buf).and(&p.grad).for_each(|w, b, &g| {
                        let g = g + c.weight_decay * *w;
                        *b = c.momentum * *b + g;
                        *w -= lr * *b;
                    });
                });
            }
        }
    }

    /// Named state tensors, for checkpointing.
    pub fn state_tensors(&self) -> Vec<(String, &Tensor)> {
        match self {
            Self::Adam { first, second, .. } => first
                .iter()
                .map(|(k, v)| (format!("adam.m.{k}"), v))
                .chain(second.iter().map(|(k, v)| (format!("adam.v.{k}"), v)))
                .collect(),
            Self::Sgd { velocity, .. } => velocity.iter().map(|(k, v)| (format!("sgd.velocity.{k}"), v)).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        match self {
            Self::Adam { step, .. } => *step,
            Self::Sgd { .. } => 0,
        }
    }

    /// Restores state previously produced by [`Optimizer::state_tensors`].
    pub fn restore(
        &mut self,
        step_count: u64,
        tensors: impl IntoIterator<Item = (String, Tensor)>,
    ) -> Result<(), String> {
        match self {
            Self::Adam { step, first, second, .. } => {
                *step = step_count;
                for (name, t) in tensors {
                    if let Some(k) = name.strip_prefix("adam.m.") {
                        first.insert(k.to_string(), t);
                    } else if let Some(k) = name.strip_prefix("adam.v.") {
                        second.insert(k.to_string(), t);
                    } else {
                        return Err(format!("unexpected optimizer tensor {name}"));
                    }
                }
            }
            Self::Sgd { velocity, .. } => {
                for (name, t) in tensors {
                    let k = name
                        .strip_prefix("sgd.velocity.")
                        .ok_or_else(|| format!("unexpected optimizer tensor {name}"))?;
                    velocity.insert(k.to_string(), t);
                }
            }
        }
        Ok(())
    }
}

/// Rescales trainable gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: ParamTree + ?Sized>(model: &mut T, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    model.visit_state_mut("", &mut |_, slot| {
        if let SlotMut::Param(p) = slot {
            if p.trainable {
                sq += p.grad.iter().map(|g| g * g).sum::<f64>();
            }
        }
    });
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        model.visit_state_mut("", &mut |_, slot| {
            if let SlotMut::Param(p) = slot {
                if p.trainable {
                    p.grad.mapv_inplace(|g| g * scale);
                }
            }
        });
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Linear, Param};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_weight(value: f64, grad: f64) -> Linear {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut l = Linear::new(1, 1, &mut rng);
        l.weight = Param::new(Tensor::from_elem(vec![1, 1], value));
        l.weight.grad.fill(grad);
        l.bias.trainable = false;
        l
    }

    #[test]
    fn sgd_momentum_matches_hand_computation() {
        let mut l = single_weight(1.0, 0.5);
        let mut opt = Optimizer::sgd(SgdConfig { momentum: 0.9, weight_decay: 0.1 });
        opt.step(&mut l, 0.1);
        // g = 0.5 + 0.1*1.0 = 0.6; buf = 0.6; w = 1 - 0.06
        assert!((l.weight.value[[0, 0]] - 0.94).abs() < 1e-15);
        opt.step(&mut l, 0.1);
        // g = 0.5 + 0.094 = 0.594; buf = 0.54 + 0.594 = 1.134; w = 0.94 - 0.1134
        assert!((l.weight.value[[0, 0]] - 0.8266).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut l = single_weight(1.0, 3.0);
        let mut opt = Optimizer::adam(AdamConfig::default());
        opt.step(&mut l, 1e-3);
        assert!((l.weight.value[[0, 0]] - (1.0 - 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut l = single_weight(1.0, 3.0);
        let before = l.bias.value.clone();
        l.bias.grad.fill(10.0);
        Optimizer::adam(AdamConfig::default()).step(&mut l, 1.0);
        assert_eq!(l.bias.value, before);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut l = single_weight(1.0, 3.0);
        l.bias.trainable = true;
        l.bias.grad.fill(4.0);
        assert!((clip_grad_norm(&mut l, 1.0) - 5.0).abs() < 1e-12);
        assert!((l.weight.grad[[0, 0]] - 0.6).abs() < 1e-12);
    }
}
