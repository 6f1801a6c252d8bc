//! AdamW with decoupled weight decay and the one-cycle learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::checkpoint::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub base_lr: f64,
    pub total_steps: usize,
    /// Fraction of steps spent warming up.
    pub warmup: f64,
    /// The schedule starts and ends at `base_lr / final_div`.
    pub final_div: f64,
}

impl OneCycle {
    pub fn new(base_lr: f64, total_steps: usize) -> Self {
        Self {
            base_lr,
            total_steps,
            warmup: 0.3,
            final_div: 1e4,
        }
    }

    /// Linear ramp from the floor to `base_lr` over the warmup steps, then
    /// cosine decay back to the floor at the last step.
    pub fn lr(&self, step: usize) -> f64 {
        let floor = self.base_lr / self.final_div;
        let last = self.total_steps.saturating_sub(1) as f64;
        let peak = (self.warmup * self.total_steps as f64).round();
        let t = (step as f64).min(last);
        if t < peak {
            floor + (self.base_lr - floor) * t / peak
        } else if last <= peak {
            self.base_lr
        } else {
            let progress = (t - peak) / (last - peak);
            floor + (self.base_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
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
            weight_decay: 0.05,
        }
    }
}

/// Optimizer state: first and second moments per parameter slot.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. Weight decay applies to matrices only (not to biases,
    /// norms or embeddings stored as vectors).
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for slot in 0..params.len() {
            let decay = if params.tensor(slot).rank() >= 2 { c.weight_decay } else { 0.0 };
            let p = params.tensor_mut(slot).data_mut();
            let (m, v, g) = (&mut self.m[slot], &mut self.v[slot], &grads[slot]);
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                p[i] -= lr * (update + decay * p[i]);
            }
        }
        Ok(())
    }

    /// Moments as named tensors for checkpointing.
    pub fn export(&self, params: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * params.len());
        for slot in 0..params.len() {
            let shape = params.tensor(slot).shape();
            let name = params.name(slot);
            out.push((format!("adamw.m.{name}"), Tensor::new(shape, self.m[slot].clone()).expect("shape")));
            out.push((format!("adamw.v.{name}"), Tensor::new(shape, self.v[slot].clone()).expect("shape")));
        }
        out
    }

    pub fn import(config: AdamWConfig, step: u64, params: &ParamStore, store: &ParamStore) -> Result<Self> {
        let mut opt = Self::new(config, params);
        opt.step = step;
        for slot in 0..params.len() {
            let name = params.name(slot);
            for (prefix, dst) in [("m", &mut opt.m[slot]), ("v", &mut opt.v[slot])] {
                let key = format!("adamw.{prefix}.{name}");
                let t = store
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state {key}")))?;
                if t.len() != dst.len() {
                    return Err(Error::Checkpoint(format!("optimizer state {key} has the wrong size")));
                }
                dst.copy_from_slice(t.data());
            }
        }
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = OneCycle::new(1e-4, 1000);
        assert!(s.lr(0) < 1e-7);
        assert!((s.lr(300) - 1e-4).abs() < 1e-18);
        assert!((s.lr(999) - 1e-8).abs() < 1e-20);
        assert!(s.lr(150) > s.lr(100) && s.lr(600) < s.lr(400));
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.update(&mut store, &[vec![0.5, -2.0]], 0.1).unwrap();
        let d = store.tensor(0).data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] + 0.9).abs() < 1e-6, "{d:?}");
    }
}
