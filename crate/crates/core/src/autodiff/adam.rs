use super::tensor::Tensor;
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

/// First and second moments for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> AdamState {
        AdamState {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> AdamState {
        AdamState {
            m: self.m.select_rows(rows),
            v: self.v.select_rows(rows),
            step: self.step,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() || state.m.shape() != state.v.shape() {
        return Err(Error::ShapeMismatch(format!(
            "adam: param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    if grad.data().iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("adam gradient".into()));
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (((p, g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let mh = *m / bc1;
        let vh = *v / bc2;
        *p -= lr * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Exponential interpolation from `lr_init` at step 0 to `lr_final` at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, lr_init: f64, lr_final: f64) -> f64 {
    if total_steps == 0 {
        return lr_final;
    }
    let frac = (step.min(total_steps)) as f64 / total_steps as f64;
    lr_init * (lr_final / lr_init).powf(frac)
}
