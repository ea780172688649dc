use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::Scalar;

/// Exponentially decayed learning rate, continuous exponent:
/// `lr * decay_rate^(step / decay_steps)`.
pub fn decayed_lr(lr: f64, step: u64, decay_steps: u64, decay_rate: f64) -> f64 {
    lr * decay_rate.powf(step as f64 / decay_steps.max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub decay_steps: u64,
    pub decay_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, decay_steps: u64, decay_rate: f64) -> Self {
        Self {
            lr,
            decay_steps,
            decay_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        decayed_lr(self.cfg.lr, self.step, self.cfg.decay_steps, self.cfg.decay_rate)
    }

    /// Applies one update from the gradient slots of `store`. The first call
    /// uses the undecayed rate.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        let lr = self.current_lr();
        let t = (self.step + 1) as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (ob1, ob2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(lr / bc1);
        let sqrt_bc2 = T::lit(bc2.sqrt());
        let eps = T::lit(c.eps);
        for (name, p) in store.iter_mut() {
            let n = p.value.len();
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                *w -= step_size * *m / (v.sqrt() / sqrt_bc2 + eps);
            }
        }
        self.step += 1;
    }
}
