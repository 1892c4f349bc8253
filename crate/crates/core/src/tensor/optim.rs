use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros(len: usize) -> Self {
        Moments {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }
}

/// One AdamW update of a single parameter at step `t` (1-based). Weight decay
/// is applied to the weights directly, not folded into the gradient.
pub fn adamw_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    state: &mut Moments<T>,
    cfg: &AdamWConfig,
    t: u64,
) -> Result<()> {
    if param.len() != grad.len() || state.m.len() != param.len() {
        return Err(Error::shape(
            "adamw_step",
            format!("param {} / grad {} / state {}", param.len(), grad.len(), state.m.len()),
        ));
    }
    if t == 0 {
        return Err(Error::InvalidArgument("AdamW step index starts at 1".into()));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for i in 0..param.len() {
        let g = grad[i].as_f64();
        let m = cfg.beta1 * state.m[i].as_f64() + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.v[i].as_f64() + (1.0 - cfg.beta2) * g * g;
        state.m[i] = T::from_f64(m);
        state.v[i] = T::from_f64(v);
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        let w = param[i].as_f64() * decay - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        param[i] = T::from_f64(w);
    }
    Ok(())
}

/// AdamW over a fixed, ordered list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    moments: Vec<Moments<T>>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        AdamW {
            config,
            moments: sizes.into_iter().map(Moments::zeros).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != self.moments.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adamw",
                format!("{} params, {} grads, {} states", params.len(), grads.len(), self.moments.len()),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw", format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
        }
        self.step += 1;
        for ((p, g), st) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            adamw_step(p.data_mut(), g.data(), st, &self.config, self.step)?;
        }
        Ok(())
    }
}
