//! AdamW with decoupled weight decay.
//!
//! ```text
//! θ ← θ·(1 − lr·λ)
//! m ← β₁m + (1 − β₁)g
//! v ← β₂v + (1 − β₂)g²
//! θ ← θ − lr · m̂ / (√v̂ + ε),   m̂ = m/(1 − β₁ᵗ),  v̂ = v/(1 − β₂ᵗ)
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid AdamW hyperparameters {self:?}"
            )))
        }
    }
}

/// Moments for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl OptimState {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
        }
    }
}

/// One AdamW update of `param` in place.
pub fn adamw_step(param: &mut Tensor, grad: &Tensor, state: &mut OptimState, cfg: &AdamWConfig) -> Result<()> {
    cfg.validate()?;
    param.same_shape(grad, "adamw_step")?;
    param.same_shape(&state.m, "adamw_step (moments)")?;
    grad.check_finite("adamw_step gradient")?;

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;

    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (((p, &g), mi), vi) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *p = *p * decay - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    param.check_finite("adamw_step")
}

/// Named optimizer state for a set of parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub states: BTreeMap<String, OptimState>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            states: BTreeMap::new(),
        })
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        let state = self
            .states
            .entry(name.to_string())
            .or_insert_with(|| OptimState::new(param.shape()));
        adamw_step(param, grad, state, &self.config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f32, wd: f32) -> AdamWConfig {
        AdamWConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut st = OptimState::new(&[3]);
        adamw_step(&mut p, &Tensor::zeros(&[3]), &mut st, &cfg(0.1, 0.0)).unwrap();
        assert_eq!(p, before);
        assert!(st.m.data().iter().all(|&v| v == 0.0));
        assert!(st.v.data().iter().all(|&v| v == 0.0));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = 1, v̂ = 1 after bias correction, so the step is lr / (1 + eps).
        let mut p = Tensor::new(vec![1], vec![0.0]).unwrap();
        let mut st = OptimState::new(&[1]);
        let g = Tensor::new(vec![1], vec![1.0]).unwrap();
        adamw_step(&mut p, &g, &mut st, &cfg(0.1, 0.0)).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-6, "{}", p.data()[0]);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let mut p = Tensor::new(vec![1], vec![2.0]).unwrap();
        let mut st = OptimState::new(&[1]);
        adamw_step(&mut p, &Tensor::zeros(&[1]), &mut st, &cfg(0.1, 0.01)).unwrap();
        assert!((p.data()[0] - 1.998).abs() < 1e-6);
    }

    #[test]
    fn zero_learning_rate_is_bit_identical() {
        let mut p = Tensor::new(vec![4], vec![0.3, -1.7, 2.5e-3, 9.0]).unwrap();
        let before: Vec<u32> = p.data().iter().map(|v: &f32| v.to_bits()).collect();
        let mut st = OptimState::new(&[4]);
        let g = Tensor::new(vec![4], vec![1.0, -3.0, 0.2, 5.0]).unwrap();
        for _ in 0..5 {
            adamw_step(&mut p, &g, &mut st, &cfg(0.0, 0.1)).unwrap();
        }
        let after: Vec<u32> = p.data().iter().map(|v: &f32| v.to_bits()).collect();
        assert_eq!(before, after);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn errors_on_shape_mismatch_and_nan() {
        let mut p = Tensor::zeros(&[2]);
        let mut st = OptimState::new(&[2]);
        assert!(matches!(
            adamw_step(&mut p, &Tensor::zeros(&[3]), &mut st, &cfg(0.1, 0.0)),
            Err(Error::ShapeMismatch { .. })
        ));
        let mut bad = Tensor::zeros(&[2]);
        bad.data_mut()[1] = f32::NAN;
        assert!(matches!(
            adamw_step(&mut p, &bad, &mut st, &cfg(0.1, 0.0)),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn rejects_bad_betas() {
        let mut c = cfg(0.1, 0.0);
        c.beta1 = 1.0;
        assert!(c.validate().is_err());
    }
}
