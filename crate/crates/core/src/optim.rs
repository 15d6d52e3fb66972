//! Adaptive-moment optimizer with decoupled weight decay, and learning-rate schedules.

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Cosine,
    Constant,
}

impl LrSchedule {
    /// Multiplier on the base learning rate at `step` of `total`.
    /// Cosine decays from 1 at step 0 to 0 at step `total`.
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                if total == 0 {
                    return 1.0;
                }
                let frac = (step.min(total)) as f64 / total as f64;
                0.5 * (1.0 + (PI * frac).cos())
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<String, Moments>,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// Advances the shared step counter used for bias correction.
    /// Call once per optimizer step, before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64, weight_decay: f64) {
        assert_eq!(param.shape(), grad.shape(), "gradient shape for {name}");
        assert!(self.step > 0, "begin_step must precede update");
        let n = param.numel();
        let state = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(state.m.iter_mut())
            .zip(state.v.iter_mut())
        {
            *p -= lr * weight_decay * *p;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_reaches_zero_and_constant_stays() {
        assert_eq!(LrSchedule::Cosine.factor(0, 100), 1.0);
        assert!(LrSchedule::Cosine.factor(100, 100).abs() < 1e-15);
        assert!((LrSchedule::Cosine.factor(50, 100) - 0.5).abs() < 1e-15);
        for s in [0, 7, 99, 100] {
            assert_eq!(LrSchedule::Constant.factor(s, 100), 1.0);
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut opt = AdamW::new();
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        opt.begin_step();
        opt.update("p", &mut p, &Tensor::vector(vec![0.3, -5.0]), 0.1, 0.0);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let mut opt = AdamW::new();
        let mut p = Tensor::vector(vec![2.0]);
        opt.begin_step();
        opt.update("p", &mut p, &Tensor::vector(vec![0.0]), 0.1, 0.5);
        assert!((p.data()[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut opt = AdamW::new();
        let mut p = Tensor::vector(vec![3.0, -4.0]);
        for _ in 0..2000 {
            opt.begin_step();
            let g = p.clone();
            opt.update("p", &mut p, &g, 0.05, 0.0);
        }
        assert!(p.data().iter().all(|v| v.abs() < 1e-2), "{p:?}");
    }
}
