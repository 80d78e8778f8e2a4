//! Adam / AdamW over flat tensors with row-resizable moment state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::to_f32_grid;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay (AdamW); zero gives plain Adam.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            weight_decay: 0.0,
        }
    }
}

/// Moment state of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Adam {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// First and second moment estimates.
    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// One bias-corrected update; parameters are rounded to the f32 grid afterwards.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::CountMismatch {
                what: "optimizer tensor",
                expected: self.m.len(),
                actual: if params.len() != self.m.len() { params.len() } else { grads.len() },
            });
        }
        self.steps += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mut p = params[i];
            if weight_decay != 0.0 {
                p -= lr * weight_decay * p;
            }
            p -= lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + eps);
            params[i] = to_f32_grid(p);
        }
        Ok(())
    }

    /// Keeps the rows (of `row_len` values) whose flag is set.
    pub fn retain_rows(&mut self, keep: &[bool], row_len: usize) {
        debug_assert_eq!(keep.len() * row_len, self.m.len());
        for buf in [&mut self.m, &mut self.v] {
            let mut w = 0;
            for (r, &k) in keep.iter().enumerate() {
                if k {
                    buf.copy_within(r * row_len..(r + 1) * row_len, w);
                    w += row_len;
                }
            }
            buf.truncate(w);
        }
    }

    /// Appends `rows` rows of zero moments.
    pub fn push_zero_rows(&mut self, rows: usize, row_len: usize) {
        self.m.resize(self.m.len() + rows * row_len, 0.0);
        self.v.resize(self.v.len() + rows * row_len, 0.0);
    }
}

/// Log-linear interpolation from `initial` to `fin` as `t` goes from 0 to 1.
pub fn exponential_lr(initial: f64, fin: f64, t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    (initial.ln() * (1.0 - t) + fin.ln() * t).exp()
}
