use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to `min_lr` over `total_steps`.
    Cosine { total_steps: u64, min_lr: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            schedule: LrSchedule::Constant,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::invalid(format!("invalid optimizer settings {self:?}")));
        }
        if let LrSchedule::Cosine { total_steps, min_lr } = self.schedule {
            if total_steps == 0 || !(0.0..=self.lr).contains(&min_lr) {
                return Err(Error::invalid("cosine schedule needs total_steps > 0 and 0 ≤ min_lr ≤ lr"));
            }
        }
        Ok(())
    }

    /// Learning rate used for step `t` (1-based).
    pub fn lr_at(&self, t: u64) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine { total_steps, min_lr } => {
                let frac = (t.saturating_sub(1)).min(total_steps) as f64 / total_steps as f64;
                min_lr + 0.5 * (self.lr - min_lr) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// AdamW with decoupled weight decay. Moments are kept per tensor, aligned
/// with the parameter store's order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    config: AdamWConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Ok(AdamW {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// Rebuilds saved state; moment shapes must mirror `params`.
    pub fn from_state(
        config: AdamWConfig,
        step: u64,
        m: Vec<Tensor<T>>,
        v: Vec<Tensor<T>>,
        params: &ParamStore<T>,
    ) -> Result<Self> {
        config.validate()?;
        check_shapes(params, &m, "first moment")?;
        check_shapes(params, &v, "second moment")?;
        Ok(AdamW { config, step, m, v })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        check_shapes(params, grads, "gradient")?;
        check_shapes(params, &self.m, "first moment")?;
        self.step += 1;
        let t = self.step;
        let c = self.config;
        let lr = T::of(c.lr_at(t));
        let (b1, b2, eps) = (T::of(c.beta1), T::of(c.beta2), T::of(c.eps));
        let decay = T::one() - lr * T::of(c.weight_decay);
        let bc1 = T::one() - T::of(c.beta1.powi(t as i32));
        let bc2 = T::one() - T::of(c.beta2.powi(t as i32));
        for (((w, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in w.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w * decay - lr * (m_hat / (v_hat.sqrt() + eps));
            }
        }
        Ok(())
    }
}

fn check_shapes<T: Real>(params: &ParamStore<T>, other: &[Tensor<T>], what: &str) -> Result<()> {
    if other.len() != params.len() {
        return Err(Error::invalid(format!(
            "{} {what} tensors for {} parameters",
            other.len(),
            params.len()
        )));
    }
    for ((name, p), o) in params.iter().zip(other) {
        if p.shape() != o.shape() {
            return Err(Error::ParameterShape {
                name: format!("{what} of {name}"),
                expected: p.shape().to_vec(),
                found: o.shape().to_vec(),
            });
        }
    }
    Ok(())
}
