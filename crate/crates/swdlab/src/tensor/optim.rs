//! Fixed-learning-rate Adam over named parameter maps.

use super::Tensor;
use std::collections::BTreeMap;

/// Adam with conventional betas. Parameters live in a `BTreeMap` so update
/// order (and therefore floating-point behavior) is deterministic.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over every parameter that accumulated a gradient.
    /// Each updated entry is replaced by a fresh leaf (with cleared grad).
    /// Errors when an update turns a parameter non-finite (divergence).
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>) -> super::Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, tensor) in params.iter_mut() {
            let Some(grad) = tensor.grad() else { continue };
            let n = tensor.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let mut data = tensor.to_vec();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                if !m[i].is_finite() || !v[i].is_finite() {
                    return Err(super::TensorError::NonFinite { op: "adam_step" });
                }
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            *tensor = Tensor::from_vec(data, tensor.shape())?.requiring_grad();
        }
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn set_step_count(&mut self, t: u64) {
        self.t = t;
    }

    /// Moment buffers for checkpointing, in deterministic name order.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &[f64], &[f64])> {
        self.m
            .iter()
            .map(|(k, m)| (k.as_str(), m.as_slice(), self.v[k].as_slice()))
    }

    pub fn restore_moment(&mut self, name: &str, m: Vec<f64>, v: Vec<f64>) {
        self.m.insert(name.to_string(), m);
        self.v.insert(name.to_string(), v);
    }
}
