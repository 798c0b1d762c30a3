use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{NavGraph, Trajectory};
use super::instruction::instruction_from_trajectory;
use super::scene::Scene;
use crate::error::{Error, Result};

pub const MIN_PATH_EDGES: usize = 4;
pub const MAX_PATH_EDGES: usize = 7;
/// Paraphrased instructions emitted per sampled trajectory.
pub const INSTRUCTIONS_PER_TRAJECTORY: usize = 3;

pub type EpisodeId = u64;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Episode {
    pub id: EpisodeId,
    pub env_id: u32,
    pub instruction: Vec<String>,
    pub trajectory: Trajectory,
    /// Which paraphrase template produced the instruction.
    pub template: usize,
}

impl Episode {
    pub fn validate(&self, graph: &NavGraph) -> Result<()> {
        if self.instruction.is_empty() {
            return Err(Error::EmptyInstruction);
        }
        if self.trajectory.len() < 2 {
            return Err(Error::InvalidTrajectory(format!(
                "episode {} has fewer than two nodes",
                self.id
            )));
        }
        self.trajectory.validate(graph)
    }
}

/// Stable episode id: environment in the high bits, index in the low bits.
pub fn episode_id(env_id: u32, index: usize) -> EpisodeId {
    ((env_id as u64) << 32) | index as u64
}

/// All ordered endpoint pairs whose shortest path has 4-7 edges.
pub fn eligible_paths(graph: &NavGraph) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for a in 0..graph.len() {
        for b in 0..graph.len() {
            if a == b {
                continue;
            }
            let p = graph.shortest_path(a, b)?;
            if (MIN_PATH_EDGES..=MAX_PATH_EDGES).contains(&p.edge_count()) {
                out.push(p);
            }
        }
    }
    Ok(out)
}

/// Samples `count` episodes. Each sampled trajectory yields three consecutive
/// episodes (one per paraphrase template); the list is truncated to `count`.
/// Distinct trajectories are used until the pool is exhausted.
pub fn generate_episodes(
    graph: &NavGraph,
    scene: &Scene,
    env_id: u32,
    count: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    if count == 0 {
        return Err(Error::GraphTooSmall("episode count must be at least 1".into()));
    }
    let pool = eligible_paths(graph)?;
    if pool.is_empty() {
        return Err(Error::GraphTooSmall(format!(
            "no shortest path with {MIN_PATH_EDGES}..={MAX_PATH_EDGES} edges"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trajectories_needed = count.div_ceil(INSTRUCTIONS_PER_TRAJECTORY);
    let mut order: Vec<usize> = Vec::with_capacity(trajectories_needed);
    while order.len() < trajectories_needed {
        let mut round: Vec<usize> = (0..pool.len()).collect();
        round.shuffle(&mut rng);
        order.extend(round.into_iter().take(trajectories_needed - order.len()));
    }
    let mut episodes = Vec::with_capacity(count);
    'outer: for &p in &order {
        for template in 0..INSTRUCTIONS_PER_TRAJECTORY {
            if episodes.len() == count {
                break 'outer;
            }
            let trajectory = pool[p].clone();
            let instruction = instruction_from_trajectory(&trajectory, scene, graph, template);
            episodes.push(Episode {
                id: episode_id(env_id, episodes.len()),
                env_id,
                instruction,
                trajectory,
                template,
            });
        }
    }
    Ok(episodes)
}
