//! Behavior cloning with teacher forcing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::observe::ObservationSource;
use super::params::PolicyParams;
use super::policy::{episode_loss, Net};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::worldgen::{NavGraph, Trajectory};

/// One environment as seen by the agent.
#[derive(Clone, Copy)]
pub struct World<'a> {
    pub graph: &'a NavGraph,
    pub observations: &'a dyn ObservationSource,
}

/// A supervised episode: instruction ids and the ground-truth path in `world`.
#[derive(Debug, Clone, PartialEq)]
pub struct BcExample {
    pub world: usize,
    pub tokens: Vec<usize>,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr: 2e-3,
            batch_size: 16,
            seed: 0,
            clip_norm: 5.0,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be a non-negative number"));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::config("clip_norm", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean teacher-forced loss over each epoch's minibatches.
    pub epoch_losses: Vec<f64>,
}

/// Loss and flat parameter gradient of one example.
fn example_grad(params: &PolicyParams, worlds: &[World<'_>], ex: &BcExample) -> Result<(f64, Vec<f64>)> {
    let w = worlds
        .get(ex.world)
        .ok_or_else(|| Error::Shape(format!("example refers to missing world {}", ex.world)))?;
    let mut net = Net::new(params, true);
    let loss = episode_loss(&mut net, w.observations, w.graph, &ex.tokens, &ex.trajectory)?;
    let grads = net.tape.backward(loss);
    let flat = net.param_grads(&grads).into_iter().flatten().collect();
    Ok((net.tape.scalar(loss), flat))
}

/// Mean teacher-forced loss over `examples`.
pub fn mean_loss(params: &PolicyParams, worlds: &[World<'_>], examples: &[BcExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Shape("no training examples".into()));
    }
    let losses = examples
        .par_iter()
        .map(|ex| {
            let w = worlds
                .get(ex.world)
                .ok_or_else(|| Error::Shape(format!("example refers to missing world {}", ex.world)))?;
            let mut net = Net::new(params, false);
            let loss = episode_loss(&mut net, w.observations, w.graph, &ex.tokens, &ex.trajectory)?;
            Ok(net.tape.scalar(loss))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Minimizes the teacher-forced cross-entropy of every decision (moves and
/// the final STOP) with ADAM over shuffled minibatches.
pub fn train_bc(
    init: &PolicyParams,
    worlds: &[World<'_>],
    examples: &[BcExample],
    opts: &TrainOptions,
) -> Result<(PolicyParams, TrainReport)> {
    opts.validate()?;
    if examples.is_empty() {
        return Err(Error::Shape("no training examples".into()));
    }
    let mut params = init.clone();
    let mut adam = Adam::new(params.count(), 0.9, 0.999);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(opts.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| example_grad(&params, worlds, &examples[i]))
                .collect::<Result<Vec<_>>>()?;
            let mut grad = vec![0.0; params.count()];
            for (loss, g) in &results {
                total += loss;
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            let n = batch.len() as f64;
            grad.iter_mut().for_each(|g| *g /= n);
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if opts.clip_norm > 0.0 && norm > opts.clip_norm {
                let s = opts.clip_norm / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
            adam.tick();
            let mut k = 0;
            for v in params.tensors_mut().iter_mut().flatten() {
                *v += adam.delta(k, grad[k], opts.lr);
                k += 1;
            }
        }
        let mean = total / examples.len() as f64;
        log::info!("bc epoch {epoch}: mean loss {mean:.4}");
        epoch_losses.push(mean);
    }
    if !params.is_finite() {
        return Err(Error::Shape("training diverged to non-finite parameters".into()));
    }
    Ok((params, TrainReport { epoch_losses }))
}
