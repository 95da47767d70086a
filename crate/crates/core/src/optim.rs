//! AdamW with decoupled weight decay and a linear warmup / linear decay
//! learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    /// Length of the schedule; training derives it from epochs and batches.
    #[serde(skip)]
    pub total_steps: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            warmup_fraction: 0.1,
            total_steps: 1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("optimizer: {m}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0 < self.beta1 && self.beta1 < 1.0 && 0.0 < self.beta2 && self.beta2 < 1.0) {
            return bad("betas must lie in (0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1)");
        }
        if self.total_steps == 0 {
            return bad("total_steps must be positive");
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> f64 {
        self.warmup_fraction * self.total_steps as f64
    }

    /// Learning rate for 1-based update `step`: ramps linearly from 0 to the
    /// base rate over the warmup steps, then decays linearly to 0 at
    /// `total_steps`.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        let t = step as f64;
        let total = self.total_steps as f64;
        let warmup = self.warmup_steps();
        if t < warmup {
            self.learning_rate * t / warmup
        } else if t >= total {
            0.0
        } else {
            self.learning_rate * (total - t) / (total - warmup)
        }
    }
}

/// Applies one AdamW update at 1-based `step` to every trainable parameter,
/// then zeroes all gradient accumulators. Frozen parameters keep their value
/// and moments untouched.
pub fn adamw_step<T: Scalar>(store: &mut ParamStore<T>, cfg: &OptimizerConfig, step: u64) {
    let lr = cfg.learning_rate_at(step);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for p in store.iter_mut() {
        if p.trainable {
            p.steps += 1;
            let t = p.steps as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let decay = if p.decay { lr * cfg.weight_decay } else { 0.0 };
            let (b1t, b2t) = (T::of(b1), T::of(b2));
            let (one_b1, one_b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
            let values = p.value.data_mut();
            let grads = p.grad.data();
            let m = p.first_moment.data_mut();
            let v = p.second_moment.data_mut();
            for i in 0..values.len() {
                let g = grads[i];
                m[i] = b1t * m[i] + one_b1 * g;
                v[i] = b2t * v[i] + one_b2 * g * g;
                let m_hat = m[i].as_f64() / c1;
                let v_hat = v[i].as_f64() / c2;
                let x = values[i].as_f64();
                let update = lr * m_hat / (v_hat.sqrt() + cfg.epsilon) + decay * x;
                values[i] = T::of(x - update);
            }
        }
    }
    store.zero_grad();
}
