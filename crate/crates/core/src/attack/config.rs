use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    /// Make the agent stop at the attack viewpoint.
    Stop,
    /// Make the agent follow an adversary-chosen path from the attack viewpoint.
    Trajectory,
}

impl fmt::Display for AttackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackMode::Stop => "stop",
            AttackMode::Trajectory => "trajectory",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// L-infinity budget on texel changes.
    pub epsilon: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    /// Attack-trajectory nodes rendered live during optimization, from v_atk.
    pub steps_rendered: usize,
    pub mode: AttackMode,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.3,
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            iterations: 300,
            batch_size: 16,
            checkpoint_every: 30,
            steps_rendered: 3,
            mode: AttackMode::Trajectory,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::config("epsilon", "epsilon out of range (0, 1]"));
        }
        self.validate_allowing_zero_budget()
    }

    /// Same as [`validate`](Self::validate) but accepts `epsilon = 0`, the
    /// no-op attack used as a control.
    pub fn validate_allowing_zero_budget(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::config("epsilon", "epsilon out of range (0, 1]"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be a non-negative number"));
        }
        for (key, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(key, "must lie in [0, 1)"));
            }
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every", "must be at least 1"));
        }
        if self.iterations == 0 || !self.iterations.is_multiple_of(self.checkpoint_every) {
            return Err(Error::config(
                "iterations",
                "must be a positive multiple of checkpoint_every",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(1..=3).contains(&self.steps_rendered) {
            return Err(Error::config("steps_rendered", "must be 1, 2 or 3"));
        }
        Ok(())
    }
}
