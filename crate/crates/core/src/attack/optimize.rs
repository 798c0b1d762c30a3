//! Masked-gradient, L-infinity projected texture optimization.

use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{AttackConfig, AttackMode};
use super::instance::{split_hash, AttackInstance};
use crate::agent::{
    candidates, encode_instruction, forced_history, raw_features, raw_grad_to_pixels, rollout_from,
    Candidate, HistoryState, Net, ObservationSource, PanoramaFeatures, PolicyParams,
    RenderedObservations, RolloutOutcome, Vocabulary, DEFAULT_MAX_STEPS, RAW_DIM,
};
use crate::error::{Error, Result};
use crate::eval::ndtw;
use crate::math::heading_between;
use crate::optim::Adam;
use crate::render::{rasterize_panorama, shade, FaceMask, PanoramaSpec, RasterBuffers, TexelGradient};
use crate::worldgen::{Episode, NavGraph, NodeId, ObjectId, Scene, TextureAtlas};

/// Rasterized sub-images that show one object, for every graph node.
#[derive(Debug, Clone)]
pub struct ObjectViews {
    pub object: ObjectId,
    per_node: Vec<Vec<(usize, RasterBuffers)>>,
}

impl ObjectViews {
    pub fn build(scene: &Scene, graph: &NavGraph, object: ObjectId, spec: &PanoramaSpec) -> Result<Self> {
        let mask = FaceMask::for_object(scene, object)?;
        let per_node = (0..graph.len())
            .into_par_iter()
            .map(|n| {
                let buffers = rasterize_panorama(scene, graph.position(n), spec)?;
                Ok(buffers
                    .into_iter()
                    .enumerate()
                    .filter(|(_, b)| b.covered_by(|f| mask.contains(f)) > 0)
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(Self { object, per_node })
    }

    /// `(sub-image index, buffers)` of views at `node` that show the object.
    pub fn at(&self, node: NodeId) -> &[(usize, RasterBuffers)] {
        &self.per_node[node]
    }
}

/// Observations of a scene whose only change from `clean` is the texture of
/// one object. Views showing the object are re-shaded from `atlas`; all
/// other views are shared with `clean`.
pub struct AttackedObservations<'a> {
    clean: &'a dyn ObservationSource,
    views: &'a ObjectViews,
    atlas: &'a TextureAtlas,
    cache: Vec<OnceLock<Arc<PanoramaFeatures>>>,
}

impl<'a> AttackedObservations<'a> {
    pub fn new(clean: &'a dyn ObservationSource, views: &'a ObjectViews, atlas: &'a TextureAtlas) -> Self {
        Self {
            clean,
            views,
            atlas,
            cache: (0..views.per_node.len()).map(|_| OnceLock::new()).collect(),
        }
    }
}

impl ObservationSource for AttackedObservations<'_> {
    fn features(&self, node: NodeId) -> Result<Arc<PanoramaFeatures>> {
        let cell = self.cache.get(node).ok_or(Error::UnknownNode(node))?;
        if let Some(f) = cell.get() {
            return Ok(f.clone());
        }
        let live = self.views.at(node);
        let base = self.clean.features(node)?;
        let feats = if live.is_empty() {
            base
        } else {
            let mut f = (*base).clone();
            for (v, buf) in live {
                f.views[*v] = raw_features(&shade(buf, self.atlas))?;
            }
            Arc::new(f)
        };
        Ok(cell.get_or_init(|| feats).clone())
    }
}

/// Forces the agent along the episode up to `v_atk`, then lets it act
/// greedily from there. The outcome's trajectory starts at `v_atk`.
pub fn hijack_rollout(
    params: &PolicyParams,
    vocab: &Vocabulary,
    obs: &dyn ObservationSource,
    graph: &NavGraph,
    episode: &Episode,
    v_atk: NodeId,
) -> Result<RolloutOutcome> {
    let i = episode
        .trajectory
        .position_of(v_atk)
        .ok_or(Error::MissingAttackViewpoint {
            episode: episode.id,
            node: v_atk,
        })?;
    let instr = encode_instruction(&vocab.encode(&episode.instruction), params)?;
    let prefix = &episode.trajectory.nodes()[..i];
    let (h, _) = forced_history(params, obs, graph, prefix)?;
    let arrival = match prefix.last() {
        Some(&p) => heading_between(graph.position(p), graph.position(v_atk)),
        None => 0.0,
    };
    rollout_from(params, obs, graph, &instr, v_atk, h, arrival, DEFAULT_MAX_STEPS)
}

/// Per-episode constants: the policy is frozen, so the instruction encoding
/// and the history before `v_atk` never change.
#[derive(Debug, Clone)]
struct CachedEpisode {
    instr: Vec<f64>,
    history: HistoryState,
    arrival: f64,
}

struct TargetStep {
    node: NodeId,
    cands: Vec<Candidate>,
    /// Index into `cands`, or `cands.len()` for STOP.
    target: usize,
    /// Heading of the move into this node along the target path.
    arrival: Option<f64>,
    clean: Arc<PanoramaFeatures>,
    /// Sub-images re-rendered from the current atlas (empty past `steps_rendered`).
    live: Vec<(usize, RasterBuffers)>,
}

/// Everything needed to evaluate the attack loss repeatedly for one instance.
pub struct AttackProblem<'a> {
    params: &'a PolicyParams,
    mask: FaceMask,
    steps: Vec<TargetStep>,
    episodes: Vec<CachedEpisode>,
}

impl<'a> AttackProblem<'a> {
    /// Caches `episodes` (which must all pass through `v_atk`) using `clean`
    /// observations for their guide prefixes. `views` must be built for the
    /// attack object.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &'a PolicyParams,
        vocab: &Vocabulary,
        scene: &Scene,
        graph: &NavGraph,
        clean: &dyn ObservationSource,
        views: &ObjectViews,
        instance: &AttackInstance,
        episodes: &[Episode],
        steps_rendered: usize,
    ) -> Result<Self> {
        if views.object != instance.attack_object {
            return Err(Error::Shape("object views built for a different object".into()));
        }
        let mask = FaceMask::for_object(scene, instance.attack_object)?;
        let path = instance.target_path();
        let mut steps = Vec::with_capacity(path.len());
        for (k, &node) in path.iter().enumerate() {
            let cands = candidates(graph, node);
            let target = match path.get(k + 1) {
                Some(next) => cands
                    .iter()
                    .position(|c| c.node == *next)
                    .ok_or_else(|| Error::InvalidTrajectory(format!("{node} and {next} are not adjacent")))?,
                None => cands.len(),
            };
            let arrival = (k > 0).then(|| heading_between(graph.position(path[k - 1]), graph.position(node)));
            let live = if k < steps_rendered {
                views.at(node).to_vec()
            } else {
                Vec::new()
            };
            steps.push(TargetStep {
                node,
                cands,
                target,
                arrival,
                clean: clean.features(node)?,
                live,
            });
        }
        let episodes = episodes
            .par_iter()
            .map(|e| {
                let i = e.trajectory.position_of(instance.v_atk).ok_or(Error::MissingAttackViewpoint {
                    episode: e.id,
                    node: instance.v_atk,
                })?;
                let prefix = &e.trajectory.nodes()[..i];
                let (history, _) = forced_history(params, clean, graph, prefix)?;
                let arrival = match prefix.last() {
                    Some(&p) => heading_between(graph.position(p), graph.position(instance.v_atk)),
                    None => 0.0,
                };
                Ok(CachedEpisode {
                    instr: encode_instruction(&vocab.encode(&e.instruction), params)?,
                    history,
                    arrival,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            params,
            mask,
            steps,
            episodes,
        })
    }

    pub fn episode_count(&self) -> usize {
        self.episodes.len()
    }

    pub fn mask(&self) -> &FaceMask {
        &self.mask
    }

    /// Loss of one cached episode and its gradient on each live view's raw
    /// features, indexed `[step][live view]`.
    fn episode_loss(&self, ep: &CachedEpisode, live_feats: &[Vec<[f64; RAW_DIM]>]) -> (f64, Vec<Vec<Vec<f64>>>) {
        let mut net = Net::new(self.params, false);
        let instr = net.tape.leaf(ep.instr.clone(), false);
        let mut h = net.tape.leaf(ep.history.0.clone(), false);
        let mut losses = Vec::with_capacity(self.steps.len());
        let mut live_vars = Vec::with_capacity(self.steps.len());
        for (k, step) in self.steps.iter().enumerate() {
            let mut views: Vec<_> = step
                .clean
                .views
                .iter()
                .map(|v| net.tape.leaf(v.to_vec(), false))
                .collect();
            let mut vars = Vec::with_capacity(step.live.len());
            for ((vi, _), f) in step.live.iter().zip(&live_feats[k]) {
                let v = net.tape.leaf(f.to_vec(), true);
                views[*vi] = v;
                vars.push(v);
            }
            live_vars.push(vars);
            let arrival = step.arrival.unwrap_or(ep.arrival);
            let out = net.step(instr, h, &views, &step.cands, arrival);
            h = out.history;
            losses.push(net.tape.neg_log_softmax(out.logits, step.target));
        }
        let total = net.tape.sum(&losses);
        let grads = net.tape.backward(total);
        let raw = live_vars
            .iter()
            .map(|vars| {
                vars.iter()
                    .map(|&v| grads.get(v).map_or_else(|| vec![0.0; RAW_DIM], <[f64]>::to_vec))
                    .collect()
            })
            .collect();
        (net.tape.scalar(total), raw)
    }

    /// Batch-mean attack loss for the cached episodes `batch` (indices, with
    /// repetition allowed) under `atlas`, and its masked texel gradient.
    pub fn loss(&self, atlas: &TextureAtlas, batch: &[usize]) -> Result<(f64, TexelGradient)> {
        if batch.is_empty() {
            return Err(Error::Shape("empty attack batch".into()));
        }
        if let Some(&i) = batch.iter().find(|&&i| i >= self.episodes.len()) {
            return Err(Error::Shape(format!("batch index {i} out of range")));
        }
        let live_feats: Vec<Vec<[f64; RAW_DIM]>> = self
            .steps
            .iter()
            .map(|s| {
                s.live
                    .iter()
                    .map(|(_, b)| raw_features(&shade(b, atlas)))
                    .collect::<Result<_>>()
            })
            .collect::<Result<_>>()?;
        let results: Vec<_> = batch
            .par_iter()
            .map(|&i| self.episode_loss(&self.episodes[i], &live_feats))
            .collect();
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let mut raw: Vec<Vec<Vec<f64>>> = self.steps.iter().map(|s| vec![vec![0.0; RAW_DIM]; s.live.len()]).collect();
        for (l, g) in &results {
            loss += l;
            for (acc_step, g_step) in raw.iter_mut().zip(g) {
                for (acc, gv) in acc_step.iter_mut().zip(g_step) {
                    acc.iter_mut().zip(gv).for_each(|(a, b)| *a += b / n);
                }
            }
        }
        let mut grad = TexelGradient::like(atlas);
        for (step, g_step) in self.steps.iter().zip(&raw) {
            for ((_, buf), g) in step.live.iter().zip(g_step) {
                let pixel = raw_grad_to_pixels(g, buf.width, buf.height);
                grad.accumulate(buf, &pixel, &self.mask)?;
            }
        }
        Ok((loss / n, grad))
    }

    /// Nodes of the target path.
    pub fn target_nodes(&self) -> Vec<NodeId> {
        self.steps.iter().map(|s| s.node).collect()
    }
}

/// Batch-mean attack loss of `batch` with every observation rendered from
/// `scene` (including its current atlas).
pub fn attack_loss(
    params: &PolicyParams,
    vocab: &Vocabulary,
    scene: &Scene,
    graph: &NavGraph,
    instance: &AttackInstance,
    batch: &[Episode],
    steps_rendered: usize,
    spec: &PanoramaSpec,
) -> Result<(f64, TexelGradient)> {
    let clean = RenderedObservations::new(scene, graph, spec)?;
    let views = ObjectViews::build(scene, graph, instance.attack_object, spec)?;
    let problem = AttackProblem::new(params, vocab, scene, graph, &clean, &views, instance, batch, steps_rendered)?;
    let idx: Vec<usize> = (0..batch.len()).collect();
    problem.loss(&scene.atlas, &idx)
}

/// Clip to the budget around `original`, then clamp to `[0, 1]`.
pub fn project(proposed: f64, original: f64, epsilon: f64) -> f64 {
    proposed.clamp(original - epsilon, original + epsilon).clamp(0.0, 1.0)
}

/// Rounds to `f32` while keeping `|result - original| <= epsilon`.
fn store_within(value: f64, original: f32, epsilon: f64) -> f32 {
    let mut v = value as f32;
    if (v as f64 - original as f64).abs() > epsilon {
        // Rounding overshot the budget; step one ulp back towards the original.
        v = if v > original {
            f32::from_bits(v.to_bits() - 1)
        } else if v == 0.0 {
            f32::from_bits(1)
        } else {
            f32::from_bits(v.to_bits() + 1)
        };
    }
    v.clamp(0.0, 1.0)
}

/// ADAM state restricted to the masked texel values.
#[derive(Debug, Clone)]
pub struct TextureOptimizer {
    adam: Adam,
    indices: Vec<usize>,
}

impl TextureOptimizer {
    /// `texels` are flat texel indices (`y * width + x`); all three channels
    /// of each are optimized.
    pub fn new(texels: &[usize], config: &AttackConfig) -> Self {
        let indices: Vec<usize> = texels.iter().flat_map(|&t| [3 * t, 3 * t + 1, 3 * t + 2]).collect();
        Self {
            adam: Adam::new(indices.len(), config.beta1, config.beta2),
            indices,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// One ADAM step on the masked values, projected onto the budget.
pub fn adam_project_step(
    atlas: &mut TextureAtlas,
    original: &TextureAtlas,
    grad: &TexelGradient,
    state: &mut TextureOptimizer,
    config: &AttackConfig,
) -> Result<()> {
    if !atlas.same_shape(original) || grad.width != atlas.width() || grad.height != atlas.height() {
        return Err(Error::Shape("atlas, original and gradient shapes differ".into()));
    }
    state.adam.tick();
    let orig = original.texels();
    let values = atlas.texels_mut();
    for (k, &i) in state.indices.iter().enumerate() {
        let d = state.adam.delta(k, grad.values[i], config.lr);
        let proposed = values[i] as f64 + d;
        values[i] = store_within(project(proposed, orig[i] as f64, config.epsilon), orig[i], config.epsilon);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub iteration: usize,
    /// Validation nDTW against the attack trajectory, or stop rate in stop mode.
    pub score: f64,
    /// Mean training-batch loss since the previous checkpoint.
    pub train_loss: f64,
}

#[derive(Debug, Clone)]
pub struct AttackRun {
    pub atlas: TextureAtlas,
    pub best_iteration: usize,
    pub checkpoints: Vec<CheckpointRecord>,
    /// Attack loss of the first batch, before any update.
    pub initial_loss: f64,
}

/// Index of the highest score; ties keep the earliest.
pub fn best_checkpoint(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Validation score of an attacked atlas.
#[allow(clippy::too_many_arguments)]
pub fn validation_score(
    params: &PolicyParams,
    vocab: &Vocabulary,
    graph: &NavGraph,
    clean: &dyn ObservationSource,
    views: &ObjectViews,
    atlas: &TextureAtlas,
    instance: &AttackInstance,
    episodes: &[Episode],
) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let obs = AttackedObservations::new(clean, views, atlas);
    let scores = episodes
        .par_iter()
        .map(|e| {
            let out = hijack_rollout(params, vocab, &obs, graph, e, instance.v_atk)?;
            Ok(match instance.mode {
                AttackMode::Stop => out.stopped_immediately as u8 as f64,
                AttackMode::Trajectory => ndtw(
                    out.trajectory.nodes(),
                    &instance.attack_trajectory,
                    graph.positions(),
                )?,
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Context shared by every step of one attack run.
pub struct AttackSetup<'a> {
    pub params: &'a PolicyParams,
    pub vocab: &'a Vocabulary,
    pub scene: &'a Scene,
    pub graph: &'a NavGraph,
    /// Observations of the unattacked scene.
    pub clean: &'a dyn ObservationSource,
    pub spec: &'a PanoramaSpec,
}

/// Runs the full optimization and returns the best checkpoint's atlas.
/// `on_step` sees the atlas after every update.
pub fn optimize_attack(
    setup: &AttackSetup<'_>,
    instance: &AttackInstance,
    config: &AttackConfig,
    on_step: &mut dyn FnMut(usize, &TextureAtlas),
) -> Result<AttackRun> {
    config.validate_allowing_zero_budget()?;
    if instance.val_split.is_empty() {
        return Err(Error::EmptyValidation);
    }
    if instance.train_split.is_empty() {
        return Err(Error::Shape("empty training split".into()));
    }
    let original = &setup.scene.atlas;
    let views = ObjectViews::build(setup.scene, setup.graph, instance.attack_object, setup.spec)?;
    let problem = AttackProblem::new(
        setup.params,
        setup.vocab,
        setup.scene,
        setup.graph,
        setup.clean,
        &views,
        instance,
        &instance.train_split,
        config.steps_rendered,
    )?;
    let texels = problem.mask().texels(setup.scene);
    let mut state = TextureOptimizer::new(&texels, config);
    let mut atlas = original.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ split_hash(instance.id));
    let n = problem.episode_count();
    let mut snapshots = Vec::new();
    let mut records = Vec::new();
    let mut initial_loss = f64::NAN;
    let mut loss_sum = 0.0;
    for it in 1..=config.iterations {
        let batch: Vec<usize> = (0..config.batch_size).map(|_| rng.gen_range(0..n)).collect();
        let (loss, grad) = problem.loss(&atlas, &batch)?;
        if it == 1 {
            initial_loss = loss;
        }
        loss_sum += loss;
        adam_project_step(&mut atlas, original, &grad, &mut state, config)?;
        on_step(it, &atlas);
        if it % config.checkpoint_every == 0 {
            let score = validation_score(
                setup.params,
                setup.vocab,
                setup.graph,
                setup.clean,
                &views,
                &atlas,
                instance,
                &instance.val_split,
            )?;
            log::debug!("instance {} iteration {it}: val score {score:.4}", instance.id);
            records.push(CheckpointRecord {
                iteration: it,
                score,
                train_loss: loss_sum / config.checkpoint_every as f64,
            });
            loss_sum = 0.0;
            snapshots.push(atlas.clone());
        }
    }
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let best = best_checkpoint(&scores).expect("at least one checkpoint");
    Ok(AttackRun {
        atlas: snapshots.swap_remove(best),
        best_iteration: records[best].iteration,
        checkpoints: records,
        initial_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_examples() {
        assert!((project(0.95, 0.5, 0.3) - 0.8).abs() < 1e-12);
        assert_eq!(project(1.3, 0.9, 0.3), 1.0);
        assert_eq!(project(-0.2, 0.1, 0.3), 0.0);
    }

    #[test]
    fn stored_values_respect_the_budget() {
        for (orig, eps) in [(0.1f32, 0.3), (0.7f32, 0.1), (0.33f32, 0.05)] {
            for proposed in [orig as f64 + eps, orig as f64 - eps] {
                let v = store_within(project(proposed, orig as f64, eps), orig, eps);
                assert!((v as f64 - orig as f64).abs() <= eps);
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn best_checkpoint_prefers_earliest_tie() {
        assert_eq!(best_checkpoint(&[0.2, 0.9, 0.9, 0.4]), Some(1));
        assert_eq!(best_checkpoint(&[]), None);
    }

    #[test]
    fn zero_gradient_step_is_a_no_op() {
        let original = TextureAtlas::filled(4, 4, [0.25, 0.5, 0.75]);
        let mut atlas = original.clone();
        let cfg = AttackConfig::default();
        let mut state = TextureOptimizer::new(&[0, 5, 15], &cfg);
        let grad = TexelGradient::like(&atlas);
        adam_project_step(&mut atlas, &original, &grad, &mut state, &cfg).unwrap();
        assert_eq!(atlas, original);
    }

    #[test]
    fn only_masked_texels_move() {
        let original = TextureAtlas::filled(4, 4, [0.5, 0.5, 0.5]);
        let mut atlas = original.clone();
        let cfg = AttackConfig::default();
        let mut state = TextureOptimizer::new(&[5], &cfg);
        let mut grad = TexelGradient::like(&atlas);
        grad.values.iter_mut().for_each(|g| *g = 1.0);
        adam_project_step(&mut atlas, &original, &grad, &mut state, &cfg).unwrap();
        for (i, (a, o)) in atlas.texels().iter().zip(original.texels()).enumerate() {
            if i / 3 == 5 {
                assert!((*a as f64 - (0.5 - cfg.lr)).abs() < 1e-6);
            } else {
                assert_eq!(a.to_bits(), o.to_bits());
            }
        }
    }
}
