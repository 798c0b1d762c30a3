//! Template-based instruction generation over a closed vocabulary.

use std::f64::consts::FRAC_PI_4;

use super::graph::{NavGraph, NodeId, Trajectory};
use super::scene::{Category, ObjectId, Scene};
use crate::math::{angle_diff, heading_between};

/// Landmark search radius around a node, in meters.
pub const LANDMARK_RADIUS: f64 = 5.0;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

/// Every token an instruction can contain, plus category synonyms that a
/// human-written instruction might use. Index order defines vocabulary ids.
pub const VOCABULARY: &[&str] = &[
    PAD, UNK, "head", "walk", "go", "to", "toward", "the", "then", "and", "stop", "by", "wait",
    "near", "at", "past", "continue", "turn", ",", ".", "north", "east", "south", "west", "left",
    "right", "straight", "around", "chair", "cabinet", "table", "plant", "sofa", "tv", "marker",
    "couch", "seat", "stool", "cupboard", "dresser", "desk", "flower", "television", "monitor",
    "screen",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Turn {
    Left,
    Straight,
    Right,
    Around,
}

impl Turn {
    /// Classifies the change between two compass headings.
    pub fn between(prev_heading: f64, next_heading: f64) -> Turn {
        let d = angle_diff(prev_heading, next_heading);
        if d.abs() < FRAC_PI_4 {
            Turn::Straight
        } else if d.abs() > 3.0 * FRAC_PI_4 {
            Turn::Around
        } else if d > 0.0 {
            Turn::Right
        } else {
            Turn::Left
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Turn::Left => "left",
            Turn::Straight => "straight",
            Turn::Right => "right",
            Turn::Around => "around",
        }
    }
}

/// Compass word for a heading, using 90-degree sectors centered on the axes.
pub fn compass_token(heading: f64) -> &'static str {
    let sector = ((heading + FRAC_PI_4) / (2.0 * FRAC_PI_4)).floor() as i64;
    match sector.rem_euclid(4) {
        0 => "north",
        1 => "east",
        2 => "south",
        _ => "west",
    }
}

/// Nearest labeled object (by horizontal distance between the node and the
/// object's centroid) within [`LANDMARK_RADIUS`]. Ties go to the smaller id.
pub fn nearest_object(scene: &Scene, graph: &NavGraph, node: NodeId) -> Option<(ObjectId, Category)> {
    let p = graph.position(node);
    let mut best: Option<(f64, ObjectId, Category)> = None;
    for obj in &scene.objects {
        let c = scene.object_center(obj.id).ok()?;
        let d = ((c.x - p.x).powi(2) + (c.y - p.y).powi(2)).sqrt();
        if d > LANDMARK_RADIUS {
            continue;
        }
        if best.is_none_or(|(bd, _, _)| d < bd) {
            best = Some((d, obj.id, obj.category));
        }
    }
    best.map(|(_, id, c)| (id, c))
}

fn landmark_token(scene: &Scene, graph: &NavGraph, node: NodeId) -> &'static str {
    nearest_object(scene, graph, node)
        .map(|(_, c)| c.token())
        .unwrap_or("marker")
}

/// Fills one of three paraphrase templates for `trajectory`.
///
/// Every template mentions the landmark nearest to each node after the
/// start, so paraphrases differ in wording but share landmark tokens. The
/// final clause always names the goal landmark.
pub fn instruction_from_trajectory(
    trajectory: &Trajectory,
    scene: &Scene,
    graph: &NavGraph,
    template_index: usize,
) -> Vec<String> {
    let nodes = trajectory.nodes();
    let mut out: Vec<&str> = Vec::new();
    let goal = landmark_token(scene, graph, *nodes.last().expect("non-empty"));
    if nodes.len() < 2 {
        match template_index % 3 {
            0 => out.extend(["stop", "by", "the", goal]),
            1 => out.extend(["wait", "near", "the", goal]),
            _ => out.extend(["stop", "at", "the", goal]),
        }
        return out.into_iter().map(String::from).collect();
    }
    let headings: Vec<f64> = nodes
        .windows(2)
        .map(|w| heading_between(graph.position(w[0]), graph.position(w[1])))
        .collect();
    for (t, w) in nodes.windows(2).enumerate() {
        let lm = landmark_token(scene, graph, w[1]);
        if t == 0 {
            let dir = compass_token(headings[0]);
            match template_index % 3 {
                0 => out.extend(["head", dir, "to", "the", lm]),
                1 => out.extend(["walk", dir, "toward", "the", lm]),
                _ => out.extend(["go", "past", "the", lm]),
            }
            continue;
        }
        let turn = Turn::between(headings[t - 1], headings[t]);
        match template_index % 3 {
            0 => out.extend(["then", "go", turn.token(), "to", "the", lm]),
            1 => match turn {
                Turn::Straight => out.extend([",", "continue", "straight", "toward", "the", lm]),
                other => out.extend([",", "turn", other.token(), "toward", "the", lm]),
            },
            _ => out.extend([",", "then", "past", "the", lm]),
        }
    }
    match template_index % 3 {
        0 => out.extend(["and", "stop", "by", "the", goal]),
        1 => out.extend([".", "wait", "near", "the", goal]),
        _ => out.extend(["and", "stop", "at", "the", goal]),
    }
    out.into_iter().map(String::from).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn turn_classification() {
        assert_eq!(Turn::between(0.0, 0.0), Turn::Straight);
        assert_eq!(Turn::between(0.0, PI / 2.0), Turn::Right);
        assert_eq!(Turn::between(0.0, 1.5 * PI), Turn::Left);
        assert_eq!(Turn::between(PI / 2.0, 1.5 * PI), Turn::Around);
    }

    #[test]
    fn compass_words() {
        assert_eq!(compass_token(0.0), "north");
        assert_eq!(compass_token(PI / 2.0), "east");
        assert_eq!(compass_token(PI), "south");
        assert_eq!(compass_token(1.5 * PI), "west");
        assert_eq!(compass_token(2.0 * PI - 0.1), "north");
    }

    #[test]
    fn vocabulary_is_small_and_unique() {
        assert!(VOCABULARY.len() <= 128);
        let set: std::collections::BTreeSet<_> = VOCABULARY.iter().collect();
        assert_eq!(set.len(), VOCABULARY.len());
        assert_eq!(VOCABULARY[0], PAD);
    }
}
