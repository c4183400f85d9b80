use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    /// LGSSM parameters stay at their initial values for this many iterations.
    pub freeze_iterations: usize,
    pub anneal_start: usize,
    pub anneal_end: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Monte-Carlo draws per sequence and step.
    pub samples: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Emit a checkpoint every this many iterations; 0 disables.
    pub checkpoint_interval: usize,
    pub clip_gradients: bool,
    pub clip_norm: f64,
    pub state_dim: usize,
    pub canvas_dim: usize,
    pub components: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full48()
    }
}

impl TrainConfig {
    pub fn full48() -> Self {
        Self {
            batch_size: 20,
            iterations: 200_000,
            freeze_iterations: 10_000,
            anneal_start: 10_000,
            anneal_end: 50_000,
            beta_start: 100.0,
            beta_end: 1.0,
            samples: 1,
            learning_rate: 1e-3,
            seed: 0,
            checkpoint_interval: 10_000,
            clip_gradients: true,
            clip_norm: 100.0,
            state_dim: 1024,
            canvas_dim: 1024,
            components: 2,
        }
    }

    /// Same protocol scaled to a tenth of the iterations and a 256-wide model.
    pub fn desk32() -> Self {
        Self {
            iterations: 20_000,
            freeze_iterations: 1_000,
            anneal_start: 1_000,
            anneal_end: 5_000,
            checkpoint_interval: 1_000,
            state_dim: 256,
            canvas_dim: 256,
            ..Self::full48()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full48" => Ok(Self::full48()),
            "desk32" => Ok(Self::desk32()),
            other => Err(Error::InvalidArgument(format!("unknown training preset '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.batch_size < 1 {
            return fail("batch size must be at least 1");
        }
        if self.samples < 1 {
            return fail("at least one Monte-Carlo sample is required");
        }
        if !(self.beta_end > 0.0 && self.beta_end <= self.beta_start && self.beta_start.is_finite()) {
            return fail("need 0 < beta_end <= beta_start");
        }
        if self.anneal_end < self.anneal_start {
            return fail("anneal window ends before it starts");
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning rate must be positive");
        }
        if self.clip_gradients && !(self.clip_norm > 0.0) {
            return fail("clip norm must be positive");
        }
        if self.state_dim == 0 || self.canvas_dim == 0 || self.components == 0 {
            return fail("model dimensions must be positive");
        }
        Ok(())
    }
}

/// KL weight: `beta_start` before the anneal window, log-linear inside it,
/// `beta_end` after.
pub fn anneal(iteration: usize, config: &TrainConfig) -> f64 {
    if iteration < config.anneal_start {
        return config.beta_start;
    }
    if iteration >= config.anneal_end {
        return config.beta_end;
    }
    let frac = (iteration - config.anneal_start) as f64 / (config.anneal_end - config.anneal_start) as f64;
    (config.beta_start.ln() + frac * (config.beta_end.ln() - config.beta_start.ln())).exp()
}
