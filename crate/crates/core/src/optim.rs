//! Adam.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    let n = param.numel();
    if grad.shape() != param.shape() || state.m.len() != n || state.v.len() != n {
        return Err(Error::Shape(format!(
            "adam: param {} vs grad {} vs state of {}",
            param.shape(),
            grad.shape(),
            state.m.len()
        )));
    }
    if let Some(i) = grad.data().iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "adam: gradient element {i} is {}",
            grad.data()[i]
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(t));
    let c2 = T::of(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(cfg.eps));
    let one = T::one();
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over a set of named tensors.
#[derive(Clone, Debug, Default)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    states: BTreeMap<String, AdamState<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            states: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>, lr: f64) -> Result<()> {
        let state = self
            .states
            .entry(name.to_string())
            .or_insert_with(|| AdamState::new(param.numel()));
        adam_step(param, grad, state, lr, &self.cfg)
            .map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("{name}: {msg}")),
                other => other,
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_keeps_params() {
        let mut p = Tensor::<f64>::vector(vec![0.5, -1.0, 2.0]);
        let before = p.clone();
        let g = Tensor::vector(vec![0.0; 3]);
        let mut st = AdamState::new(3);
        adam_step(&mut p, &g, &mut st, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::<f64>::vector(vec![0.0]);
        let mut st = AdamState::new(1);
        adam_step(&mut p, &Tensor::vector(vec![1.0]), &mut st, 0.1, &AdamConfig::default()).unwrap();
        // m̂ = 1, v̂ = 1: update = lr / (1 + eps)
        let want = -0.1 / (1.0 + 1e-8);
        assert!((p.data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn identical_inputs_identical_updates() {
        let mut opt = Adam::<f32>::new(AdamConfig::default());
        let mut a = Tensor::vector(vec![1.0, 2.0]);
        let mut b = a.clone();
        let g = Tensor::vector(vec![0.3, -0.7]);
        for _ in 0..3 {
            opt.step("a", &mut a, &g, 0.01).unwrap();
            opt.step("b", &mut b, &g, 0.01).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_non_finite() {
        let mut opt = Adam::<f32>::new(AdamConfig::default());
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let err = opt
            .step("w", &mut p, &Tensor::vector(vec![0.0, f32::NAN]), 0.1)
            .unwrap_err();
        assert!(err.to_string().contains("w"), "{err}");
        assert_eq!(p.data(), &[1.0, 2.0]);
    }
}
