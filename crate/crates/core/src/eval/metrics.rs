//! Path metrics and attack-instance factors.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::math::{heading_between, Vec3};
use crate::worldgen::{Category, Episode, NavGraph, NodeId};

/// Success radius and nDTW normalization distance, meters.
pub const SUCCESS_DISTANCE: f64 = 3.0;
const ENTRANCE_BINS: usize = 12;

fn pos(positions: &[Vec3], n: NodeId) -> Result<Vec3> {
    positions.get(n).copied().ok_or(Error::UnknownNode(n))
}

/// Dynamic time warping with Euclidean node distance as the local cost and
/// steps `(i+1, j)`, `(i, j+1)`, `(i+1, j+1)`; both endpoints aligned.
pub fn dtw(p: &[NodeId], q: &[NodeId], positions: &[Vec3]) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::EmptyPath);
    }
    let pp: Vec<Vec3> = p.iter().map(|&n| pos(positions, n)).collect::<Result<_>>()?;
    let qq: Vec<Vec3> = q.iter().map(|&n| pos(positions, n)).collect::<Result<_>>()?;
    let m = qq.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for a in &pp {
        cur[0] = f64::INFINITY;
        for (j, b) in qq.iter().enumerate() {
            let best = prev[j].min(prev[j + 1]).min(cur[j]);
            cur[j + 1] = a.distance(*b) + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// `exp(-dtw / (|r| * d_th))`.
pub fn ndtw_with(p: &[NodeId], r: &[NodeId], positions: &[Vec3], d_th: f64) -> Result<f64> {
    Ok((-dtw(p, r, positions)? / (r.len() as f64 * d_th)).exp())
}

pub fn ndtw(p: &[NodeId], r: &[NodeId], positions: &[Vec3]) -> Result<f64> {
    ndtw_with(p, r, positions, SUCCESS_DISTANCE)
}

/// Final nodes no further apart than 3 m (inclusive).
pub fn success(p: &[NodeId], r: &[NodeId], positions: &[Vec3]) -> Result<bool> {
    let (a, b) = (p.last().ok_or(Error::EmptyPath)?, r.last().ok_or(Error::EmptyPath)?);
    Ok(pos(positions, *a)?.distance(pos(positions, *b)?) <= SUCCESS_DISTANCE)
}

/// Any node of `p` within 3 m of the final node of `r`.
pub fn oracle_success(p: &[NodeId], r: &[NodeId], positions: &[Vec3]) -> Result<bool> {
    if p.is_empty() {
        return Err(Error::EmptyPath);
    }
    let goal = pos(positions, *r.last().ok_or(Error::EmptyPath)?)?;
    for &n in p {
        if pos(positions, n)?.distance(goal) <= SUCCESS_DISTANCE {
            return Ok(true);
        }
    }
    Ok(false)
}

/// 30-degree bin of a compass heading.
pub fn heading_bin(heading: f64) -> usize {
    let k = (heading / (PI / 6.0) + 1e-9).floor() as i64;
    k.rem_euclid(ENTRANCE_BINS as i64) as usize
}

/// Shannon entropy (nats) of a histogram.
pub fn entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    h.max(0.0)
}

/// Entropy of the binned headings with which `episodes` enter `v_atk`.
/// Episodes starting at `v_atk` do not enter it and are skipped.
pub fn heading_entropy(graph: &NavGraph, v_atk: NodeId, episodes: &[Episode]) -> Result<f64> {
    let mut counts = [0usize; ENTRANCE_BINS];
    for e in episodes {
        let i = e.trajectory.position_of(v_atk).ok_or(Error::MissingAttackViewpoint {
            episode: e.id,
            node: v_atk,
        })?;
        if i > 0 {
            let prev = e.trajectory.nodes()[i - 1];
            counts[heading_bin(heading_between(graph.position(prev), graph.position(v_atk)))] += 1;
        }
    }
    if counts.iter().sum::<usize>() == 0 {
        return Err(Error::InvalidTrajectory(format!("no episode enters node {v_atk} via an edge")));
    }
    Ok(entropy(&counts))
}

/// Words that refer to each object category.
pub fn synonyms(category: Category) -> &'static [&'static str] {
    match category {
        Category::Sofa => &["sofa", "couch"],
        Category::Chair => &["chair", "seat", "stool"],
        Category::Cabinet => &["cabinet", "cupboard", "dresser"],
        Category::Table => &["table", "desk"],
        Category::Plant => &["plant", "flower"],
        Category::TvMonitor => &["tv", "television", "monitor", "screen"],
    }
}

/// Whether any token names the category (case-insensitive).
pub fn object_mentioned<S: AsRef<str>>(tokens: &[S], category: Category) -> bool {
    let words = synonyms(category);
    tokens.iter().any(|t| {
        let t = t.as_ref().to_lowercase();
        words.contains(&t.as_str())
    })
}
