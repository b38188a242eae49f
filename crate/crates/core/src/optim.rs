//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::probe::ProbeParams;
use crate::scalar::Scalar;

/// Anything that exposes its parameters as a fixed sequence of flat tensors.
pub trait ParamSet<T> {
    fn slices(&self) -> Vec<&[T]>;
    fn slices_mut(&mut self) -> Vec<&mut [T]>;
}

impl<T: Scalar> ParamSet<T> for ProbeParams<T> {
    fn slices(&self) -> Vec<&[T]> {
        self.tensors().into_iter().map(|t| t.data).collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        self.tensors_mut()
    }
}

impl<T> ParamSet<T> for Vec<Vec<T>> {
    fn slices(&self) -> Vec<&[T]> {
        self.iter().map(Vec::as_slice).collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        self.iter_mut().map(Vec::as_mut_slice).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
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

/// First and second moment estimates plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<P: ParamSet<T>>(params: &P, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<T>> = params
            .slices()
            .iter()
            .map(|s| vec![T::zero(); s.len()])
            .collect();
        AdamState {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }
}

pub fn adam_step<T: Scalar, P: ParamSet<T>>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    let grads = grads.slices();
    let mut params = params.slices_mut();
    if grads.len() != params.len() || state.first.len() != params.len() {
        return Err(Error::Shape(
            "optimizer state does not match parameter tensors".into(),
        ));
    }
    for ((p, g), m) in params.iter().zip(&grads).zip(&state.first) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::Shape(
                "optimizer state does not match parameter shapes".into(),
            ));
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let correction1 = T::lit(1.0 - beta1.powi(t));
    let correction2 = T::lit(1.0 - beta2.powi(t));
    let (b1, b2, eps, lr) = (T::lit(beta1), T::lit(beta2), T::lit(eps), T::lit(lr));
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(&grads)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            let m_hat = m[i] / correction1;
            let v_hat = v[i] / correction2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
