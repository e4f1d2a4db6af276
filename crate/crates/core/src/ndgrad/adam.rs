use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;

use super::tensor::{Scalar, Tensor};
use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// First and second moments of one named parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<F> {
    pub name: String,
    pub m: Vec<F>,
    pub v: Vec<F>,
}

/// Adam with bias correction. Moments are keyed by parameter name and
/// created (zeroed) the first time a parameter is stepped.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F = f32> {
    pub config: AdamConfig,
    t: u64,
    slots: Vec<Moments<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            slots: Vec::new(),
        }
    }

    /// Rebuilds a state saved with [`AdamState::step_count`] and [`AdamState::moments`].
    pub fn restore(config: AdamConfig, t: u64, slots: Vec<Moments<F>>) -> Self {
        Self { config, t, slots }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> &[Moments<F>] {
        &self.slots
    }

    fn slot(&mut self, name: &str, len: usize) -> Result<&mut Moments<F>> {
        let pos = match self.slots.iter().position(|s| s.name == name) {
            Some(p) => p,
            None => {
                self.slots.push(Moments {
                    name: name.to_string(),
                    m: vec![F::zero(); len],
                    v: vec![F::zero(); len],
                });
                self.slots.len() - 1
            }
        };
        let slot = &mut self.slots[pos];
        if slot.m.len() != len {
            return Err(contract(alloc::format!(
                "parameter {name} changed size from {} to {len}",
                slot.m.len()
            )));
        }
        Ok(slot)
    }

    /// One Adam update of every parameter in `params`, then zeroes their
    /// gradients. Every parameter must hold a gradient.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor<F>)]) -> Result<()> {
        for (name, p) in params.iter() {
            if p.grad().is_none() {
                return Err(contract(alloc::format!("parameter {name} has no gradient")));
            }
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - Float::powi(beta1, t);
        let bc2 = 1.0 - Float::powi(beta2, t);
        let (b1, b2) = (F::of(beta1), F::of(beta2));
        let (lr, eps) = (F::of(lr), F::of(epsilon));
        let (bc1, bc2) = (F::of(bc1), F::of(bc2));
        for (name, p) in params.iter_mut() {
            let grad: Vec<F> = p.grad().expect("checked above").to_vec();
            let slot = self.slot(name, grad.len())?;
            let data = p.data_mut();
            for j in 0..grad.len() {
                let g = grad[j];
                slot.m[j] = b1 * slot.m[j] + (F::one() - b1) * g;
                slot.v[j] = b2 * slot.v[j] + (F::one() - b2) * g * g;
                let m_hat = slot.m[j] / bc1;
                let v_hat = slot.v[j] / bc2;
                data[j] = data[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_matches_hand_computation() {
        let mut w = Tensor::<f64>::scalar(1.0).into_param();
        w.accumulate_grad(&[0.5]).unwrap();
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1));
        adam.step(&mut [("w", &mut w)]).unwrap();
        // m = 0.05, v = 0.00025; m̂ = 0.5, v̂ = 0.25; step = 0.1 * 0.5 / (0.5 + 1e-8)
        let expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((w.data()[0] - expected).abs() < 1e-15);
        assert_eq!(w.grad().unwrap(), &[0.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_and_zero_lr_leave_params_unchanged() {
        let mut w = Tensor::<f32>::new(&[3], alloc::vec![1.0, -2.0, 3.0])
            .unwrap()
            .into_param();
        w.accumulate_grad(&[0.0; 3]).unwrap();
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut [("w", &mut w)]).unwrap();
        assert_eq!(w.data(), &[1.0, -2.0, 3.0]);

        let mut frozen_lr = AdamState::new(AdamConfig::with_lr(0.0));
        w.accumulate_grad(&[1.0, 1.0, 1.0]).unwrap();
        frozen_lr.step(&mut [("w", &mut w)]).unwrap();
        assert_eq!(w.data(), &[1.0, -2.0, 3.0]);
        assert_eq!(frozen_lr.step_count(), 1);
        assert!(frozen_lr.moments()[0].m.iter().all(|&m| m != 0.0));
        assert!(frozen_lr.moments()[0].v.iter().all(|&v| v != 0.0));
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut w = Tensor::<f32>::zeros(&[2]).into_param();
        let mut adam = AdamState::new(AdamConfig::default());
        let err = adam.step(&mut [("head.weight", &mut w)]).unwrap_err();
        assert!(alloc::format!("{err}").contains("head.weight"));
        assert_eq!(adam.step_count(), 0);
    }
}
