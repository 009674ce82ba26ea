//! Named parameters, non-trainable buffers (batchnorm running stats) and the
//! bias-corrected ADAM update.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::graph::BnUpdate;
use super::Tensor;

/// Gradients keyed by parameter name, as produced by `Graph::backward`.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.map.insert(name.into(), grad);
    }

    pub(crate) fn accumulate(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        match self.map.get_mut(name) {
            Some(existing) => {
                if existing.shape() != grad.shape() {
                    return Err(Error::dim(format!(
                        "gradient shape mismatch for {name:?}"
                    )));
                }
                for (a, b) in existing.data_mut().iter_mut().zip(grad.data()) {
                    *a += b;
                }
            }
            None => {
                self.map.insert(name.to_string(), grad.clone());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// l2 penalty weight; enters the update as an extra gradient term
    /// 2 * weight_decay * parameter.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Named parameter map with per-parameter first/second ADAM moments and a
/// step counter. Buffers hold state that is updated outside the gradient path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
    moment1: BTreeMap<String, Tensor>,
    moment2: BTreeMap<String, Tensor>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_param(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        self.moment1
            .insert(name.clone(), Tensor::zeros(tensor.shape().to_vec()));
        self.moment2
            .insert(name.clone(), Tensor::zeros(tensor.shape().to_vec()));
        self.params.insert(name, tensor);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.buffers.insert(name.into(), tensor);
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn set_param(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        match self.params.get_mut(name) {
            Some(existing) => {
                if existing.shape() != tensor.shape() {
                    return Err(Error::dim(format!("shape mismatch replacing {name:?}")));
                }
                *existing = tensor;
                Ok(())
            }
            None => Err(Error::contract(format!("unknown parameter {name:?}"))),
        }
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn buffer_names(&self) -> impl Iterator<Item = &String> {
        self.buffers.keys()
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        Some((self.moment1.get(name)?, self.moment2.get(name)?))
    }

    pub(crate) fn set_state(
        &mut self,
        name: &str,
        moment1: Tensor,
        moment2: Tensor,
    ) -> Result<()> {
        if !self.params.contains_key(name) {
            return Err(Error::contract(format!("unknown parameter {name:?}")));
        }
        self.moment1.insert(name.to_string(), moment1);
        self.moment2.insert(name.to_string(), moment2);
        Ok(())
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// One bias-corrected ADAM step over the supplied gradients. Parameters
    /// without a gradient entry are left untouched.
    pub fn adam_step(&mut self, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, grad) in grads.iter() {
            let param = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter {name:?}")))?;
            if param.shape() != grad.shape() {
                return Err(Error::dim(format!(
                    "gradient shape {:?} does not match parameter {name:?} {:?}",
                    grad.shape(),
                    param.shape()
                )));
            }
            let m = self.moment1.get_mut(name).expect("moment tracked per param");
            let v = self.moment2.get_mut(name).expect("moment tracked per param");
            for i in 0..param.numel() {
                let g = grad.data()[i] + 2.0 * cfg.weight_decay * param.data()[i];
                let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * g;
                let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                param.data_mut()[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }

    /// Fold batch statistics into the running-stat buffers:
    /// running = momentum * running + (1 - momentum) * batch.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate], momentum: f64) -> Result<()> {
        for update in updates {
            for (suffix, batch) in [("running_mean", &update.mean), ("running_var", &update.var)] {
                let key = format!("{}.{}", update.name, suffix);
                let buffer = self
                    .buffers
                    .get_mut(&key)
                    .ok_or_else(|| Error::contract(format!("unknown buffer {key:?}")))?;
                if buffer.numel() != batch.len() {
                    return Err(Error::dim(format!("buffer {key:?} length mismatch")));
                }
                for (r, b) in buffer.data_mut().iter_mut().zip(batch) {
                    *r = momentum * *r + (1.0 - momentum) * b;
                }
            }
        }
        Ok(())
    }
}
