//! AdamW and the warmup + cosine learning-rate schedule.

use std::f64::consts::PI;

use indexmap::IndexMap;

use crate::error::{config_err, Error, Result};
use crate::model::{ParamRole, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub base_lr: f64,
    pub warmup_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 5,
            total_epochs: 2000,
            base_lr: 1e-3,
            warmup_lr: 2e-8,
            min_lr: 2e-4,
            weight_decay: 1e-8,
            batch_size: 64,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs == 0 || self.batch_size == 0 {
            return config_err("warmup_epochs and batch_size must be positive");
        }
        if self.warmup_epochs >= self.total_epochs {
            return config_err(format!(
                "warmup_epochs ({}) must be below total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            ));
        }
        let rates = [self.warmup_lr, self.min_lr, self.base_lr, self.weight_decay];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return config_err("learning rates and weight decay must be positive and finite");
        }
        if !(self.warmup_lr <= self.min_lr && self.min_lr <= self.base_lr) {
            return config_err("expected warmup_lr <= min_lr <= base_lr");
        }
        Ok(())
    }
}

/// Learning rate at a (possibly fractional) epoch: linear warmup from
/// `warmup_lr` to `base_lr`, then cosine decay to `min_lr` at `total_epochs`.
pub fn lr_at(epoch: f64, cfg: &ScheduleConfig) -> Result<f64> {
    let total = cfg.total_epochs as f64;
    if !(0.0..=total).contains(&epoch) {
        return Err(Error::Range { value: epoch, range: format!("[0, {total}]") });
    }
    let warmup = cfg.warmup_epochs as f64;
    if epoch < warmup {
        Ok(cfg.warmup_lr + (cfg.base_lr - cfg.warmup_lr) * (epoch / warmup))
    } else {
        let progress = (epoch - warmup) / (total - warmup);
        Ok(cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + (PI * progress).cos()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// AdamW moments for every trainable tensor of one store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed steps.
    pub t: u64,
    pub moments: IndexMap<String, Moments>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let moments = store
            .iter()
            .filter(|(_, e)| e.role.trainable())
            .map(|(name, e)| {
                let n = e.tensor.numel();
                (name.to_string(), Moments { m: vec![0.0; n], v: vec![0.0; n] })
            })
            .collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments }
    }

    /// One update of every trainable tensor from its populated gradient.
    /// Decay `θ ← θ·(1 − lr·wd)` applies to [`ParamRole::Weight`] only.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, weight_decay: f64) -> Result<()> {
        for (name, entry) in store.iter() {
            if !entry.role.trainable() {
                continue;
            }
            let Some(mom) = self.moments.get(name) else {
                return Err(Error::Contract(format!("no optimizer state for {name}")));
            };
            if mom.m.len() != entry.tensor.numel() || mom.v.len() != entry.tensor.numel() {
                return Err(Error::Contract(format!("optimizer state for {name} has the wrong extent")));
            }
            if entry.tensor.grad.is_none() {
                return Err(Error::Contract(format!("missing gradient for trainable parameter {name}")));
            }
        }

        self.t += 1;
        let t = self.t as f64;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powf(t);
        let c2 = 1.0 - b2.powf(t);
        for (name, entry) in store.iter_mut() {
            if !entry.role.trainable() {
                continue;
            }
            let mom = self.moments.get_mut(name).expect("checked above");
            let decay = if entry.role == ParamRole::Weight { 1.0 - lr * weight_decay } else { 1.0 };
            let grad = entry.tensor.grad.take().expect("checked above");
            let data = entry.tensor.data_mut();
            for (i, &g) in grad.iter().enumerate() {
                mom.m[i] = b1 * mom.m[i] + (1.0 - b1) * g;
                mom.v[i] = b2 * mom.v[i] + (1.0 - b2) * g * g;
                let m_hat = mom.m[i] / c1;
                let v_hat = mom.v[i] / c2;
                data[i] = data[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
            entry.tensor.grad = Some(grad);
        }
        Ok(())
    }
}

/// Sets every trainable gradient to exactly zero.
pub fn zero_grads(store: &mut ParamStore) {
    for (_, entry) in store.iter_mut() {
        if entry.role.trainable() {
            entry.tensor.zero_grad();
        }
    }
}
