use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
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

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        AdamState {
            first: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            second: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update from each parameter's accumulated
/// gradient. Parameters without a gradient are left untouched.
pub fn adam_step<T: Scalar>(params: &mut [Tensor<T>], state: &mut AdamState<T>, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if state.first.len() != params.len() || state.second.len() != params.len() {
        return Err(Error::shape(format!(
            "optimizer tracks {} tensors, got {}",
            state.first.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if state.first[i].len() != p.len() || state.second[i].len() != p.len() {
            return Err(Error::shape(format!("optimizer moment {i} does not match its parameter")));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    for (i, p) in params.iter_mut().enumerate() {
        let Some(grad) = p.grad().map(<[T]>::to_vec) else {
            continue;
        };
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for ((x, g), (mi, vi)) in p.data_mut().iter_mut().zip(grad).zip(m.iter_mut().zip(v.iter_mut())) {
            *mi = b1 * *mi + (T::one() - b1) * g;
            *vi = b2 * *vi + (T::one() - b2) * g * g;
            let m_hat = mi.to_f64() / bc1;
            let v_hat = vi.to_f64() / bc2;
            *x = *x - T::lit(lr * m_hat / (v_hat.sqrt() + cfg.eps));
        }
    }
    Ok(())
}
