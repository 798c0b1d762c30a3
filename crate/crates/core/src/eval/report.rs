//! Per-instance evaluation reports and the factor table export.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{heading_entropy, ndtw, object_mentioned, oracle_success, success};
use crate::agent::{rollout, ObservationSource, PolicyParams, Vocabulary, World, DEFAULT_MAX_STEPS};
use crate::attack::{hijack_rollout, AttackInstance};
use crate::error::{Error, Result};
use crate::render::{coverage_from_buffers, rasterize_panorama, PanoramaSpec};
use crate::worldgen::{Category, Episode, EpisodeId, NavGraph, NodeId, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// The adversary's path (`[v_atk]` for stop attacks).
    Attack,
    /// The episode's own path from `v_atk` on.
    Original,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode_id: EpisodeId,
    /// Agent path from `v_atk` on.
    pub trajectory: Vec<NodeId>,
    pub success: bool,
    pub oracle_success: bool,
    pub ndtw: f64,
    pub stopped_at_vatk: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub reference: Reference,
    pub rows: Vec<EpisodeMetrics>,
    pub sr_pct: f64,
    pub osr_pct: f64,
    pub ndtw_pct: f64,
    pub stop_rate_pct: f64,
}

impl MetricsReport {
    pub fn from_rows(reference: Reference, rows: Vec<EpisodeMetrics>) -> Self {
        let n = rows.len().max(1) as f64;
        let pct = |f: &dyn Fn(&EpisodeMetrics) -> f64| 100.0 * rows.iter().map(f).sum::<f64>() / n;
        Self {
            reference,
            sr_pct: pct(&|r| r.success as u8 as f64),
            osr_pct: pct(&|r| r.oracle_success as u8 as f64),
            ndtw_pct: pct(&|r| r.ndtw),
            stop_rate_pct: pct(&|r| r.stopped_at_vatk as u8 as f64),
            rows,
        }
    }

    /// Mean nDTW in `[0, 1]`.
    pub fn mean_ndtw(&self) -> f64 {
        self.ndtw_pct / 100.0
    }
}

/// Rolls every episode out through its guide prefix in the observed scene
/// and scores the path after `v_atk` against `reference`.
pub fn evaluate_instance(
    params: &PolicyParams,
    vocab: &Vocabulary,
    graph: &NavGraph,
    obs: &dyn ObservationSource,
    instance: &AttackInstance,
    episodes: &[Episode],
    reference: Reference,
) -> Result<MetricsReport> {
    let rows = episodes
        .par_iter()
        .map(|e| {
            let out = hijack_rollout(params, vocab, obs, graph, e, instance.v_atk)?;
            let reference_path: Vec<NodeId> = match reference {
                Reference::Attack => instance.target_path(),
                Reference::Original => {
                    let i = e.trajectory.position_of(instance.v_atk).expect("checked by rollout");
                    e.trajectory.nodes()[i..].to_vec()
                }
            };
            let p = out.trajectory.nodes();
            let pos = graph.positions();
            Ok(EpisodeMetrics {
                episode_id: e.id,
                trajectory: p.to_vec(),
                success: success(p, &reference_path, pos)?,
                oracle_success: oracle_success(p, &reference_path, pos)?,
                ndtw: ndtw(p, &reference_path, pos)?,
                stopped_at_vatk: out.stopped_immediately,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_rows(reference, rows))
}

/// Per-instance covariates for the factor table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFactors {
    pub instance_id: u64,
    pub category: Category,
    /// Coverage of the attack object in its best sub-image at `v_atk`, percent.
    pub cov_vatk_pct: f64,
    /// Mean over the rendered attack steps of the best sub-image coverage, percent.
    pub cov_mean_pct: f64,
    pub heading_entropy_nats: f64,
    pub object_mentioned: bool,
}

pub fn instance_factors(
    instance: &AttackInstance,
    scene: &Scene,
    graph: &NavGraph,
    spec: &PanoramaSpec,
    steps_rendered: usize,
) -> Result<InstanceFactors> {
    let best_cov = |node: NodeId| -> Result<f64> {
        let buffers = rasterize_panorama(scene, graph.position(node), spec)?;
        let cov = coverage_from_buffers(scene, &buffers, instance.attack_object)?;
        Ok(cov.into_iter().fold(0.0, f64::max))
    };
    let path = instance.target_path();
    let rendered = &path[..steps_rendered.clamp(1, path.len())];
    let covs = rendered.iter().map(|&n| best_cov(n)).collect::<Result<Vec<_>>>()?;
    let support: Vec<Episode> = instance
        .train_split
        .iter()
        .chain(&instance.val_split)
        .cloned()
        .collect();
    Ok(InstanceFactors {
        instance_id: instance.id,
        category: instance.category,
        cov_vatk_pct: 100.0 * covs[0],
        cov_mean_pct: 100.0 * covs.iter().sum::<f64>() / covs.len() as f64,
        heading_entropy_nats: heading_entropy(graph, instance.v_atk, &support).unwrap_or(0.0),
        object_mentioned: object_mentioned(&instance.test_episode.instruction, instance.category),
    })
}

/// One row of the long-format factor table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorRow {
    pub instance_id: u64,
    /// 0 = unattacked, 1 = attacked.
    pub attack: u8,
    pub category: Category,
    pub ndtw: f64,
    pub cov_vatk_pct: f64,
    pub cov_mean_pct: f64,
    pub heading_entropy_nats: f64,
    pub object_mentioned: bool,
}

pub const FACTOR_HEADER: &str =
    "instance_id,attack,category,ndtw,cov_vatk_pct,cov_mean_pct,heading_entropy_nats,object_mentioned";

/// Pairs each instance's unattacked and attacked report into two rows.
pub fn factor_rows(
    factors: &[InstanceFactors],
    pre: &[MetricsReport],
    post: &[MetricsReport],
) -> Result<Vec<FactorRow>> {
    if factors.len() != pre.len() || factors.len() != post.len() {
        return Err(Error::Misaligned(format!(
            "{} instances, {} pre-attack reports, {} post-attack reports",
            factors.len(),
            pre.len(),
            post.len()
        )));
    }
    let mut rows = Vec::with_capacity(2 * factors.len());
    for ((f, a), b) in factors.iter().zip(pre).zip(post) {
        if a.rows.len() != b.rows.len()
            || a.rows.iter().zip(&b.rows).any(|(x, y)| x.episode_id != y.episode_id)
        {
            return Err(Error::Misaligned(format!(
                "reports of instance {} cover different episodes",
                f.instance_id
            )));
        }
        for (attack, r) in [(0u8, a), (1u8, b)] {
            rows.push(FactorRow {
                instance_id: f.instance_id,
                attack,
                category: f.category,
                ndtw: r.mean_ndtw(),
                cov_vatk_pct: f.cov_vatk_pct,
                cov_mean_pct: f.cov_mean_pct,
                heading_entropy_nats: f.heading_entropy_nats,
                object_mentioned: f.object_mentioned,
            });
        }
    }
    Ok(rows)
}

/// Writes the factor table as CSV with [`FACTOR_HEADER`].
pub fn export_factors<W: Write>(
    factors: &[InstanceFactors],
    pre: &[MetricsReport],
    post: &[MetricsReport],
    out: W,
) -> Result<Vec<FactorRow>> {
    let rows = factor_rows(factors, pre, post)?;
    write_factor_rows(&rows, out)?;
    Ok(rows)
}

pub fn write_factor_rows<W: Write>(rows: &[FactorRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(FACTOR_HEADER.split(','))?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_factor_rows<R: Read>(input: R) -> Result<Vec<FactorRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header.join(",") != FACTOR_HEADER {
        return Err(Error::Corrupt {
            path: "factors csv".into(),
            message: format!("unexpected header {}", header.join(",")),
        });
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Held-out navigation quality of a policy, for the competence gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Competence {
    pub episodes: usize,
    pub sr_pct: f64,
    /// Mean nDTW in `[0, 1]`.
    pub ndtw: f64,
}

pub const COMPETENCE_MIN_SR_PCT: f64 = 80.0;
pub const COMPETENCE_MIN_NDTW: f64 = 0.75;

impl Competence {
    pub fn passed(&self) -> bool {
        self.sr_pct >= COMPETENCE_MIN_SR_PCT && self.ndtw >= COMPETENCE_MIN_NDTW
    }
}

/// Greedy rollouts of each episode's instruction from its start node,
/// scored against its own path. `episodes[i]` lives in `worlds[world_of[i]]`.
pub fn competence(
    params: &PolicyParams,
    vocab: &Vocabulary,
    worlds: &[World<'_>],
    episodes: &[(usize, &Episode)],
) -> Result<Competence> {
    if episodes.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let scores = episodes
        .par_iter()
        .map(|&(w, e)| {
            let world = worlds
                .get(w)
                .ok_or_else(|| Error::Shape(format!("episode {} refers to missing world {w}", e.id)))?;
            let tokens = vocab.encode(&e.instruction);
            let p = rollout(
                params,
                world.observations,
                world.graph,
                &tokens,
                e.trajectory.first(),
                DEFAULT_MAX_STEPS,
            )?;
            let pos = world.graph.positions();
            let r = e.trajectory.nodes();
            Ok((success(p.nodes(), r, pos)? as u8 as f64, ndtw(p.nodes(), r, pos)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = scores.len() as f64;
    Ok(Competence {
        episodes: scores.len(),
        sr_pct: 100.0 * scores.iter().map(|s| s.0).sum::<f64>() / n,
        ndtw: scores.iter().map(|s| s.1).sum::<f64>() / n,
    })
}
