//! Adam optimization with polynomial learning-rate decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `base_lr * (1 - iter/max_iter)^power`.
pub fn poly_lr(base_lr: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    debug_assert!(iter <= max_iter);
    base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power)
}

struct Moments {
    m: Tensor,
    v: Tensor,
}

/// Bias-corrected Adam with optional decoupled-style L2 (weight decay is
/// added to the gradient before the moment updates, for flagged
/// parameters only).
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Opens one optimizer step; every parameter updated afterwards shares
    /// the same bias-correction exponent.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies one parameter update. `decay` selects whether weight decay
    /// is added to this parameter's gradient (segmenter conv kernels only;
    /// never norm affine or biases).
    pub fn update(
        &mut self,
        name: &str,
        param: &mut Tensor,
        grad: &Tensor,
        lr: f64,
        decay: bool,
    ) -> Result<()> {
        debug_assert!(self.step > 0, "begin_step before update");
        if grad.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NanGradient { param: name.to_string() });
        }
        let entry = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
            m: Tensor::zeros(param.shape()),
            v: Tensor::zeros(param.shape()),
        });
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let wd = if decay { self.weight_decay } else { 0.0 };
        for i in 0..param.numel() {
            let g = grad.data()[i] + wd * param.data()[i];
            let m = self.beta1 * entry.m.data()[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * entry.v.data()[i] + (1.0 - self.beta2) * g * g;
            entry.m.data_mut()[i] = m;
            entry.v.data_mut()[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            param.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
