//! Attack-instance selection from episode data.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::AttackMode;
use crate::error::{Error, Result};
use crate::render::{coverage_from_buffers, rasterize_panorama, PanoramaSpec};
use crate::worldgen::{Category, Episode, EpisodeId, NavGraph, NodeId, ObjectId, Scene, Trajectory};

/// Minimum fraction of a sub-image an attack object must cover (inclusive).
pub const COVERAGE_THRESHOLD: f64 = 0.40;
/// Supporting training episodes required at the attack viewpoint.
pub const MIN_SUPPORT: usize = 5;
/// Minimum distance between the attack goal and the original goal, meters.
pub const FAR_GOAL_DISTANCE: f64 = 3.0;
const TRAIN_FRACTION: f64 = 0.8;
/// Preferred edge count of an attack trajectory.
const ATTACK_PATH_EDGES: std::ops::RangeInclusive<usize> = 2..=4;

/// Per node: `(object, max coverage over the 36 sub-images)` for every
/// object at or above [`COVERAGE_THRESHOLD`], in ascending object id.
pub type CandidateMap = BTreeMap<NodeId, Vec<(ObjectId, f64)>>;

/// Keeps objects whose maximum coverage reaches the threshold.
pub fn filter_candidates(max_coverage: &[(ObjectId, f64)]) -> Vec<(ObjectId, f64)> {
    max_coverage
        .iter()
        .copied()
        .filter(|&(_, c)| c >= COVERAGE_THRESHOLD)
        .collect()
}

/// Maximum coverage of every object at `node`.
pub fn max_coverages(scene: &Scene, graph: &NavGraph, node: NodeId, spec: &PanoramaSpec) -> Result<Vec<(ObjectId, f64)>> {
    let buffers = rasterize_panorama(scene, graph.position(node), spec)?;
    scene
        .objects
        .iter()
        .map(|o| {
            let cov = coverage_from_buffers(scene, &buffers, o.id)?;
            Ok((o.id, cov.into_iter().fold(0.0, f64::max)))
        })
        .collect()
}

pub fn candidate_objects(scene: &Scene, graph: &NavGraph, spec: &PanoramaSpec) -> Result<CandidateMap> {
    (0..graph.len())
        .map(|n| Ok((n, filter_candidates(&max_coverages(scene, graph, n, spec)?))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackInstance {
    /// Same as the test episode id.
    pub id: u64,
    pub env_id: u32,
    pub mode: AttackMode,
    pub test_episode: Episode,
    pub attack_object: ObjectId,
    pub category: Category,
    /// Maximum sub-image coverage of the attack object at `v_atk`.
    pub coverage: f64,
    pub v_atk: NodeId,
    /// Empty in stop mode.
    pub attack_trajectory: Vec<NodeId>,
    pub train_split: Vec<Episode>,
    pub val_split: Vec<Episode>,
}

impl AttackInstance {
    pub fn validate(&self, graph: &NavGraph) -> Result<()> {
        if !self.test_episode.trajectory.contains(self.v_atk) {
            return Err(Error::MissingAttackViewpoint {
                episode: self.test_episode.id,
                node: self.v_atk,
            });
        }
        let guide = guide_of(&self.test_episode.trajectory, self.v_atk).expect("checked above");
        for e in self.train_split.iter().chain(&self.val_split) {
            let g = guide_of(&e.trajectory, self.v_atk).ok_or(Error::MissingAttackViewpoint {
                episode: e.id,
                node: self.v_atk,
            })?;
            if g == guide {
                return Err(Error::InvalidTrajectory(format!(
                    "supporting episode {} shares the test guide trajectory",
                    e.id
                )));
            }
        }
        if self.train_split.len() + self.val_split.len() < MIN_SUPPORT {
            return Err(Error::GraphTooSmall(format!(
                "{} supporting episodes, need {MIN_SUPPORT}",
                self.train_split.len() + self.val_split.len()
            )));
        }
        match self.mode {
            AttackMode::Stop if !self.attack_trajectory.is_empty() => Err(Error::InvalidTrajectory(
                "stop attacks have an empty attack trajectory".into(),
            )),
            AttackMode::Trajectory => {
                if self.attack_trajectory.first() != Some(&self.v_atk) {
                    return Err(Error::InvalidTrajectory("attack trajectory must start at v_atk".into()));
                }
                Trajectory::from_nodes_unchecked(self.attack_trajectory.clone()).validate(graph)
            }
            AttackMode::Stop => Ok(()),
        }
    }

    /// Nodes the agent should visit from `v_atk` on, including `v_atk`.
    /// A stop attack targets `[v_atk]`.
    pub fn target_path(&self) -> Vec<NodeId> {
        match self.mode {
            AttackMode::Stop => vec![self.v_atk],
            AttackMode::Trajectory => self.attack_trajectory.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    NoCandidate,
    NoFarGoal,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rejection::NoCandidate => "no_candidate",
            Rejection::NoFarGoal => "no_far_goal",
        })
    }
}

/// Prefix of `trajectory` up to and including the first visit of `v`.
pub fn guide_of(trajectory: &Trajectory, v: NodeId) -> Option<&[NodeId]> {
    trajectory.position_of(v).map(|i| &trajectory.nodes()[..=i])
}

/// Deterministic 64-bit mix of an episode id.
pub fn split_hash(id: EpisodeId) -> u64 {
    let mut z = id.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sorts by ascending [`split_hash`] and cuts at 80%, keeping at least one
/// episode on each side.
pub fn split_support(mut support: Vec<Episode>) -> (Vec<Episode>, Vec<Episode>) {
    support.sort_by_key(|e| (split_hash(e.id), e.id));
    let n = support.len();
    let cut = ((n as f64 * TRAIN_FRACTION).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let val = support.split_off(cut.min(n));
    (support, val)
}

fn supporting<'e>(
    test: &Episode,
    train: &'e [Episode],
    v: NodeId,
    mode: AttackMode,
) -> Vec<&'e Episode> {
    let guide = guide_of(&test.trajectory, v).expect("v lies on the test trajectory");
    train
        .iter()
        .filter(|e| e.env_id == test.env_id && e.id != test.id)
        .filter(|e| guide_of(&e.trajectory, v).is_some_and(|g| g != guide))
        .filter(|e| mode == AttackMode::Trajectory || e.trajectory.last() != v)
        .collect()
}

/// Picks the attack goal: nodes at least [`FAR_GOAL_DISTANCE`] from the
/// original goal, preferring 2-4 edge paths whose first move leaves the
/// original route. The choice among equals is seeded by the episode id.
fn attack_path(graph: &NavGraph, test: &Episode, v_atk: NodeId) -> Result<Option<Vec<NodeId>>> {
    let goal = graph.position(test.trajectory.last());
    let original_next = test
        .trajectory
        .position_of(v_atk)
        .and_then(|i| test.trajectory.nodes().get(i + 1).copied());
    let mut tiers: [Vec<Vec<NodeId>>; 3] = Default::default();
    for g in 0..graph.len() {
        if g == v_atk || graph.position(g).distance(goal) < FAR_GOAL_DISTANCE {
            continue;
        }
        let path = graph.shortest_path(v_atk, g)?.into_nodes();
        let preferred_len = ATTACK_PATH_EDGES.contains(&(path.len() - 1));
        let diverges = Some(path[1]) != original_next;
        let tier = match (preferred_len, diverges) {
            (true, true) => 0,
            (true, false) => 1,
            _ => 2,
        };
        tiers[tier].push(path);
    }
    let Some(pool) = tiers.into_iter().find(|t| !t.is_empty()) else {
        return Ok(None);
    };
    let mut rng = ChaCha8Rng::seed_from_u64(split_hash(test.id));
    Ok(pool.choose(&mut rng).cloned())
}

/// Scans the test trajectory (excluding its final node) for the viewpoint
/// and object with the largest coverage among those with enough support.
/// Coverage ties keep the earlier viewpoint and the smaller object id.
pub fn build_attack_instance(
    test: &Episode,
    train: &[Episode],
    scene: &Scene,
    graph: &NavGraph,
    candidates: &CandidateMap,
    mode: AttackMode,
) -> Result<std::result::Result<AttackInstance, Rejection>> {
    test.validate(graph)?;
    let nodes = test.trajectory.nodes();
    let mut best: Option<(f64, NodeId, ObjectId)> = None;
    for &v in &nodes[..nodes.len() - 1] {
        let Some(objs) = candidates.get(&v) else { continue };
        if objs.is_empty() || supporting(test, train, v, mode).len() < MIN_SUPPORT {
            continue;
        }
        for &(o, c) in objs {
            if best.is_none_or(|(bc, _, _)| c > bc) {
                best = Some((c, v, o));
            }
        }
    }
    let Some((coverage, v_atk, object)) = best else {
        return Ok(Err(Rejection::NoCandidate));
    };
    let attack_trajectory = match mode {
        AttackMode::Stop => Vec::new(),
        AttackMode::Trajectory => match attack_path(graph, test, v_atk)? {
            Some(p) => p,
            None => return Ok(Err(Rejection::NoFarGoal)),
        },
    };
    let support = supporting(test, train, v_atk, mode).into_iter().cloned().collect();
    let (train_split, val_split) = split_support(support);
    let instance = AttackInstance {
        id: test.id,
        env_id: test.env_id,
        mode,
        test_episode: test.clone(),
        attack_object: object,
        category: scene.object(object)?.category,
        coverage,
        v_atk,
        attack_trajectory,
        train_split,
        val_split,
    };
    instance.validate(graph)?;
    Ok(Ok(instance))
}
