use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::model::{AdapterSet, FreezeMask, Gradients, ParameterStore};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Linear warmup over `warmup_frac` of the steps, then cosine decay to
    /// `min_ratio · lr`.
    WarmupCosine {
        #[serde(default = "default_warmup")]
        warmup_frac: f64,
        #[serde(default)]
        min_ratio: f64,
    },
}

fn default_warmup() -> f64 {
    0.05
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::WarmupCosine { warmup_frac: default_warmup(), min_ratio: 0.0 }
    }
}

impl Schedule {
    /// Learning rate for 0-based `step` out of `total`.
    pub fn lr(&self, base: f64, step: usize, total: usize) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::WarmupCosine { warmup_frac, min_ratio } => {
                let total = total.max(1) as f64;
                let warm = (warmup_frac * total).ceil();
                let s = step as f64;
                if s < warm {
                    return base * (s + 1.0) / warm;
                }
                let span = (total - warm).max(1.0);
                let progress = ((s - warm) / span).min(1.0);
                let min = base * min_ratio;
                min + (base - min) * 0.5 * (1.0 + (PI * progress).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    #[serde(default = "b1")]
    pub beta1: f64,
    #[serde(default = "b2")]
    pub beta2: f64,
    #[serde(default = "eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn b1() -> f64 {
    0.9
}
fn b2() -> f64 {
    0.999
}
fn eps() -> f64 {
    1e-8
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: b1(), beta2: b2(), eps: eps(), weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with decoupled weight decay. Moments exist only for names that
/// have been updated, which are always names of the freeze mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, step: 0, moments: BTreeMap::new() }
    }

    fn update_one(&mut self, name: &str, param: &mut [f32], grad: &[f64], lr: f64, t: f64) {
        let c = self.config;
        let mo = self.moments.entry(name.to_string()).or_insert_with(|| Moments { m: vec![0.0; param.len()], v: vec![0.0; param.len()] });
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        for i in 0..param.len() {
            let g = grad[i];
            mo.m[i] = c.beta1 * mo.m[i] + (1.0 - c.beta1) * g;
            mo.v[i] = c.beta2 * mo.v[i] + (1.0 - c.beta2) * g * g;
            let mhat = mo.m[i] / bc1;
            let vhat = mo.v[i] / bc2;
            let p = param[i] as f64;
            let next = p - lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * p);
            param[i] = next as f32;
        }
    }

    /// Applies one update to the parameters named in `mask`. Gradients for
    /// names outside the mask are an error; a non-finite gradient aborts
    /// before anything is modified.
    pub fn step(
        &mut self,
        store: &mut ParameterStore,
        adapters: &mut AdapterSet,
        grads: &Gradients,
        mask: &FreezeMask,
        lr: f64,
    ) -> Result<(), TrainError> {
        for (name, g) in grads.iter() {
            if !mask.contains(name) {
                return Err(TrainError::Shape(format!("gradient for frozen parameter `{name}`")));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NanGradient(name.to_string()));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        for (name, g) in grads.iter() {
            let param = match store.tensor_mut(name) {
                Some(p) => p.data_mut(),
                None => adapters
                    .tensor_mut(name)
                    .ok_or_else(|| TrainError::Shape(format!("no parameter named `{name}`")))?
                    .data_mut(),
            };
            if param.len() != g.len() {
                return Err(TrainError::Shape(format!("gradient for `{name}` has {} elements, parameter {}", g.len(), param.len())));
            }
            self.update_one(name, param, g, lr, t);
        }
        Ok(())
    }

    /// Update of a free-standing parameter vector.
    pub fn step_slice(&mut self, name: &str, param: &mut [f32], grad: &[f64], lr: f64) -> Result<(), TrainError> {
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NanGradient(name.to_string()));
        }
        self.step += 1;
        let t = self.step as f64;
        self.update_one(name, param, grad, lr, t);
        Ok(())
    }
}

/// Rescales gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = Schedule::default();
        assert!(s.lr(1.0, 0, 100) < s.lr(1.0, 3, 100));
        assert!((s.lr(1.0, 4, 100) - 1.0).abs() < 1e-12);
        assert!(s.lr(1.0, 99, 100) < 0.01);
        assert_eq!(Schedule::Constant.lr(0.5, 77, 100), 0.5);
    }

    #[test]
    fn quadratic_converges() {
        // f(x) = (x - 3)^2, minimum at 3
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut x = [0.0f32];
        let sched = Schedule::default();
        for step in 0..200 {
            let g = [2.0 * (x[0] as f64 - 3.0)];
            opt.step_slice("x", &mut x, &g, sched.lr(0.1, step, 200)).unwrap();
        }
        assert!((x[0] - 3.0).abs() < 1e-2, "{}", x[0]);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut x = [1.5f32, -2.0];
        opt.step_slice("x", &mut x, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(x, [1.5, -2.0]);
    }

    #[test]
    fn nan_names_parameter() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt.step_slice("layers.0.q_proj", &mut [0.0], &[f64::NAN], 0.1).unwrap_err();
        assert!(err.to_string().contains("layers.0.q_proj"));
    }

    #[test]
    fn clipping() {
        let mut g = Gradients::default();
        g.insert("a", vec![3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
