use serde::{Deserialize, Serialize};

use crate::params::{quantize, ParamSet};

/// Adam with linear warmup. Parameters and moments are rounded to float32
/// after every step so a float32 checkpoint resumes bit-exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, warmup_steps: 100 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || (0..params.len()).map(|i| vec![0.0; params.data(i).len()]).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }
}

impl Adam {
    /// Learning rate after warmup for the step about to be taken.
    pub fn warmed(&self, lr: f64, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            lr
        } else {
            lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    /// One update. `grads[i]` is `None` for parameters that received no gradient;
    /// frozen parameters are never touched.
    pub fn step(&self, params: &mut ParamSet, grads: &[Option<&[f64]>], state: &mut AdamState, lr: f64) {
        let lr = self.warmed(lr, state.step);
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            if params.is_frozen(i) {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            let p = params.data_mut(i);
            for j in 0..p.len() {
                m[j] = quantize(self.beta1 * m[j] + (1.0 - self.beta1) * g[j]);
                v[j] = quantize(self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j]);
                let upd = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                p[j] = quantize(p[j] - upd);
            }
        }
    }
}
