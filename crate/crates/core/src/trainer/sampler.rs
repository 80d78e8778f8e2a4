use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Ascending,
    Descending,
}

/// Sliding metric window `[B_lower + kT, B_upper + kT]` applied every `K` iterations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncrementalSamplerConfig {
    pub metric: String,
    pub b_lower: f64,
    pub b_upper: f64,
    /// Window step per iteration; `None` sweeps `[0, 1]` over 70% of the stage.
    pub step: Option<f64>,
    pub every: usize,
    pub direction: Direction,
}

impl IncrementalSamplerConfig {
    pub fn ascending(metric: &str) -> Self {
        Self {
            metric: metric.to_string(),
            b_lower: 0.0,
            b_upper: 0.15,
            step: None,
            every: 5,
            direction: Direction::Ascending,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let step_ok = self.step.is_none_or(|t| t >= 0.0 && t.is_finite());
        if !(self.b_lower <= self.b_upper && step_ok && self.every >= 1) {
            return Err(Error::Invalid(format!("invalid sampler config {self:?}")));
        }
        Ok(())
    }

    pub fn step_for(&self, stage_iters: usize) -> f64 {
        self.step.unwrap_or(1.0 / (0.7 * stage_iters.max(1) as f64))
    }

    /// Window at iteration `k`, mirrored into `[1 - upper, 1 - lower]` when descending.
    pub fn window(&self, k: usize, stage_iters: usize) -> (f64, f64) {
        let t = self.step_for(stage_iters);
        let lo = self.b_lower + k as f64 * t;
        let hi = self.b_upper + k as f64 * t;
        match self.direction {
            Direction::Ascending => (lo, hi),
            Direction::Descending => (1.0 - hi, 1.0 - lo),
        }
    }

    pub fn is_active(&self, k: usize) -> bool {
        k % self.every == 0
    }
}

/// Frames whose metric lies in the closed window.
pub fn eligible_frames(metrics: &[f64], candidates: &[usize], window: (f64, f64)) -> Vec<usize> {
    candidates
        .iter()
        .copied()
        .filter(|&i| metrics[i] >= window.0 && metrics[i] <= window.1)
        .collect()
}

/// A uniformly random eligible frame, or `None` when the window is empty.
pub fn incremental_sample<R: Rng>(
    metrics: &[f64],
    candidates: &[usize],
    window: (f64, f64),
    rng: &mut R,
) -> Option<usize> {
    let eligible = eligible_frames(metrics, candidates, window);
    if eligible.is_empty() {
        None
    } else {
        Some(eligible[rng.random_range(0..eligible.len())])
    }
}
