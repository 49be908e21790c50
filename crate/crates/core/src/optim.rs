//! Adam with bias correction, and a milestone step-decay schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// First and second moment estimates for every parameter, keyed by name.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient in `grads`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, grad) in grads {
            let param = params.get_mut(name)?;
            if param.shape() != grad.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("'{name}' is {:?} but its gradient is {:?}", param.shape(), grad.shape()),
                ));
            }
            let n = grad.numel();
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            });
            let (b1, b2) = (T::lit(beta1), T::lit(beta2));
            for (((p, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = m.as_f64() / bc1;
                let v_hat = v.as_f64() / bc2;
                *p -= T::lit(lr * m_hat / (v_hat.sqrt() + eps));
            }
        }
        Ok(())
    }
}

/// Multiplies the base rate by `factor` at each milestone, given as fractions
/// of the total step count.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDecay {
    pub base: f64,
    pub factor: f64,
    boundaries: Vec<u64>,
}

impl StepDecay {
    pub fn new(base: f64, factor: f64, milestones: &[f64], total_steps: u64) -> Self {
        let boundaries = milestones
            .iter()
            .map(|f| (f * total_steps as f64).round() as u64)
            .collect();
        Self {
            base,
            factor,
            boundaries,
        }
    }

    /// Step indices (zero-based) at which the rate drops.
    pub fn boundaries(&self) -> &[u64] {
        &self.boundaries
    }

    pub fn lr(&self, step: u64) -> f64 {
        let crossed = self.boundaries.iter().filter(|&&b| step >= b).count();
        self.base * self.factor.powi(crossed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v));
        s
    }

    fn grad(v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("w".to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = one_param(0.7);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut p, &grad(0.0), 0.1).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.7);
    }

    #[test]
    fn two_unit_gradients_match_recurrence() {
        let mut p = one_param(0.0);
        let mut opt = Adam::new(AdamConfig::default());
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            opt.step(&mut p, &grad(1.0), lr).unwrap();
            m = b1 * m + (1.0 - b1);
            v = b2 * v + (1.0 - b2);
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((p.get("w").unwrap().item() - w).abs() < 1e-9);
        // each bias-corrected step moves by lr / (1 + eps)
        assert!((w + 0.2).abs() < 1e-7);
    }

    #[test]
    fn decay_crosses_milestones() {
        let s = StepDecay::new(5e-5, 0.1, &[0.5, 0.75], 200);
        assert_eq!(s.boundaries(), &[100, 150]);
        assert_eq!(s.lr(0), 5e-5);
        assert_eq!(s.lr(99), 5e-5);
        assert!((s.lr(100) - 5e-6).abs() < 1e-20);
        assert!((s.lr(150) - 5e-7).abs() < 1e-20);
    }
}
