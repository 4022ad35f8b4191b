//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    states: Vec<Option<AdamState>>,
}

impl Adam {
    pub fn new(lr: f64) -> Result<Self> {
        if lr.is_nan() || lr <= 0.0 {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            t: 0,
            states: Vec::new(),
        })
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn state(&self, index: usize) -> Option<&AdamState> {
        self.states.get(index).and_then(Option::as_ref)
    }

    /// Applies one update to every trainable parameter, then clears all
    /// gradients. Fails without touching anything if a trainable parameter
    /// has no gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.iter().find(|p| p.trainable && p.grad.is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        self.states.resize(store.len(), None);
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (p, slot) in store.iter_mut().zip(self.states.iter_mut()) {
            let grad = p.grad.take();
            if !p.trainable {
                continue;
            }
            let grad = grad.expect("checked above");
            let state = slot.get_or_insert_with(|| AdamState {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
            });
            let values = p.value.data_mut();
            let (m, v) = (state.m.data_mut(), state.v.data_mut());
            for i in 0..values.len() {
                let g = grad.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
