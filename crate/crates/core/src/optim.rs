//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Moments<T> {
    pub m1: Tensor<T>,
    pub m2: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamId, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments<T>> {
        self.moments.get(&id)
    }

    /// Restores optimizer state, e.g. from a checkpoint.
    pub fn restore(&mut self, step: u64, moments: BTreeMap<ParamId, Moments<T>>) {
        self.step = step;
        self.moments = moments;
    }

    /// Updates every trainable parameter in `ids`. Frozen parameters are skipped.
    pub fn step(&mut self, store: &mut ParamStore<T>, ids: &[ParamId]) -> Result<()> {
        for &id in ids {
            let p = store.get(id);
            if p.trainable && p.grad.is_none() {
                return Err(Error::contract(
                    "adam_step",
                    format!("parameter {} has no gradient", p.name),
                ));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(c.lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        for &id in ids {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let grad = p.grad.as_ref().expect("checked above");
            let m = self.moments.entry(id).or_insert_with(|| Moments {
                m1: Tensor::zeros(p.value.shape()),
                m2: Tensor::zeros(p.value.shape()),
            });
            let values = p.value.data_mut();
            let (m1, m2) = (m.m1.data_mut(), m.m2.data_mut());
            for i in 0..values.len() {
                let g = grad.data()[i];
                m1[i] = b1 * m1[i] + one_b1 * g;
                m2[i] = b2 * m2[i] + one_b2 * g * g;
                values[i] = values[i] - step_size * m1[i] / ((m2[i] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with_grad(value: f64, grad: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::full(&[3], value), true);
        store.accumulate_grad(id, &[grad; 3]);
        (store, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut store, id) = store_with_grad(1.0, 0.37);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        });
        adam.step(&mut store, &[id]).unwrap();
        // Bias-corrected m̂ = g, v̂ = g², so the update is lr·g/(|g|+ε).
        let expect = 1.0 - 0.01 * 0.37 / (0.37 + 1e-8);
        for &v in store.get(id).value.data() {
            assert!((v - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut store, id) = store_with_grad(0.5, 0.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, &[id]).unwrap();
        assert_eq!(store.get(id).value.data(), &[0.5; 3]);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut store = ParamStore::<f32>::new();
        let id = store.insert("w", Tensor::zeros(&[2]), true);
        let mut adam = Adam::new(AdamConfig::default());
        assert!(matches!(
            adam.step(&mut store, &[id]),
            Err(Error::Contract { .. })
        ));
    }

    #[test]
    fn frozen_params_do_not_move() {
        let mut store = ParamStore::<f32>::new();
        let id = store.insert("w", Tensor::full(&[2], 1.0), false);
        store.accumulate_grad(id, &[1.0, 1.0]);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, &[id]).unwrap();
        assert_eq!(store.get(id).value.data(), &[1.0, 1.0]);
    }
}
