//! AdamW with decoupled weight decay, and the one-cycle learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moments per parameter plus the step count.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    /// Number of completed steps.
    pub t: u64,
    moments: BTreeMap<ParamId, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.moments.get(&id).map(|(m, v)| (m, v))
    }

    pub fn set_moments(&mut self, id: ParamId, m: Tensor<T>, v: Tensor<T>) -> Result<()> {
        m.same_shape(&v, "adamw moments")?;
        self.moments.insert(id, (m, v));
        Ok(())
    }

    /// One update of every parameter in `sets` from the gradients stored in
    /// their gradient slots:
    /// `θ ← θ(1 − lr·λ) − lr·m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, sets: &mut [ParamSet<T>], lr: f64) -> Result<()> {
        let c = self.config;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powf(self.t as f64);
        let bc2 = 1.0 - c.beta2.powf(self.t as f64);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step = T::lit(lr / bc1);
        let sqrt_bc2 = T::lit(bc2.sqrt());
        let eps = T::lit(c.eps);
        let decay = T::lit(1.0 - lr * c.weight_decay);
        for set in sets.iter_mut() {
            let ids: Vec<ParamId> = set.ids().collect();
            for id in ids {
                let (value, grad) = set.value_and_grad_mut(id);
                let (m, v) = self.moments.entry(id).or_insert_with(|| {
                    (
                        Tensor::zeros(value.shape().to_vec()),
                        Tensor::zeros(value.shape().to_vec()),
                    )
                });
                if m.shape() != value.shape() {
                    return Err(Error::shape("adamw", m.shape(), value.shape()));
                }
                for (((p, &g), mi), vi) in value
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                {
                    *mi = b1 * *mi + one_b1 * g;
                    *vi = b2 * *vi + one_b2 * g * g;
                    *p = *p * decay - step * *mi / ((*vi).sqrt() / sqrt_bc2 + eps);
                }
            }
            set.step += 1;
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(sets: &mut [ParamSet<T>], max_norm: f64) -> f64 {
    let norm = sets.iter().map(|s| s.grad_norm().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let f = T::lit(max_norm / norm);
        for set in sets.iter_mut() {
            let ids: Vec<ParamId> = set.ids().collect();
            for id in ids {
                let g = set.grad_mut(id);
                *g = g.scale(f);
            }
        }
    }
    norm
}

/// One-cycle schedule: linear warm-up from `peak/25` to `peak` over the first
/// `⌊0.3·T⌋` steps, then cosine annealing to `peak/10⁴` at the last step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub peak: f64,
    pub total_steps: u64,
}

impl OneCycle {
    pub const PCT_START: f64 = 0.3;
    pub const DIV_FACTOR: f64 = 25.0;
    pub const FINAL_DIV_FACTOR: f64 = 1e4;

    pub fn new(peak: f64, total_steps: u64) -> Result<Self> {
        if !(peak > 0.0 && peak.is_finite()) || total_steps == 0 {
            return Err(Error::config(format!(
                "one-cycle needs a positive peak and at least one step (peak={peak}, steps={total_steps})"
            )));
        }
        Ok(Self { peak, total_steps })
    }

    pub fn lr(&self, t: u64) -> Result<f64> {
        if t >= self.total_steps {
            return Err(Error::contract(format!(
                "step {t} is past the schedule's {} steps",
                self.total_steps
            )));
        }
        let start = self.peak / Self::DIV_FACTOR;
        let end = self.peak / Self::FINAL_DIV_FACTOR;
        let warm = (Self::PCT_START * self.total_steps as f64).floor();
        let last = (self.total_steps - 1) as f64;
        let t = t as f64;
        if t <= warm || last <= warm {
            let frac = if warm > 0.0 { (t / warm).min(1.0) } else { 1.0 };
            return Ok((start + (self.peak - start) * frac).min(self.peak));
        }
        let p = (t - warm) / (last - warm);
        Ok((end + (self.peak - end) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())).min(self.peak))
    }
}
