use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;

pub type NodeId = usize;

/// Relative tolerance used when comparing accumulated path lengths.
const LENGTH_EPS: f64 = 1e-9;

/// Undirected navigation graph with metric node positions.
///
/// Node ids are dense indices into `positions`. Edges are stored once with
/// the smaller endpoint first; neighbor lists are kept sorted by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphRepr", into = "GraphRepr")]
pub struct NavGraph {
    positions: Vec<Vec3>,
    edges: BTreeSet<(NodeId, NodeId)>,
    neighbors: Vec<Vec<NodeId>>,
}

#[derive(Serialize, Deserialize)]
struct NodeRepr {
    id: NodeId,
    position: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct GraphRepr {
    nodes: Vec<NodeRepr>,
    edges: Vec<[NodeId; 2]>,
}

impl TryFrom<GraphRepr> for NavGraph {
    type Error = Error;

    fn try_from(r: GraphRepr) -> Result<Self> {
        let mut positions = vec![None; r.nodes.len()];
        for n in r.nodes {
            let slot = positions
                .get_mut(n.id)
                .ok_or_else(|| Error::InvalidTrajectory(format!("node id {} out of range", n.id)))?;
            *slot = Some(Vec3::new(n.position[0], n.position[1], n.position[2]));
        }
        let positions = positions
            .into_iter()
            .enumerate()
            .map(|(i, p)| p.ok_or_else(|| Error::GraphTooSmall(format!("node id {i} missing"))))
            .collect::<Result<Vec<_>>>()?;
        let edges = r.edges.into_iter().map(|[a, b]| (a, b)).collect::<Vec<_>>();
        NavGraph::new(positions, &edges)
    }
}

impl From<NavGraph> for GraphRepr {
    fn from(g: NavGraph) -> Self {
        GraphRepr {
            nodes: g
                .positions
                .iter()
                .enumerate()
                .map(|(id, p)| NodeRepr {
                    id,
                    position: [p.x, p.y, p.z],
                })
                .collect(),
            edges: g.edges.iter().map(|&(a, b)| [a, b]).collect(),
        }
    }
}

impl NavGraph {
    /// Builds a graph, validating ids, self-loops and finiteness.
    /// Connectivity is not enforced here; see [`NavGraph::is_connected`].
    pub fn new(positions: Vec<Vec3>, edges: &[(NodeId, NodeId)]) -> Result<Self> {
        if let Some(i) = positions.iter().position(|p| !p.is_finite()) {
            return Err(Error::WorldParams(format!("node {i} has a non-finite position")));
        }
        let n = positions.len();
        let mut set = BTreeSet::new();
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n {
                return Err(Error::UnknownNode(a));
            }
            if b >= n {
                return Err(Error::UnknownNode(b));
            }
            if a == b {
                return Err(Error::WorldParams(format!("self-loop at node {a}")));
            }
            let key = (a.min(b), a.max(b));
            if set.insert(key) {
                neighbors[a].push(b);
                neighbors[b].push(a);
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Ok(Self {
            positions,
            edges: set,
            neighbors,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, id: NodeId) -> Vec3 {
        self.positions[id]
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn contains(&self, id: NodeId) -> bool {
        id < self.positions.len()
    }

    pub fn neighbors(&self, id: NodeId) -> &[NodeId] {
        &self.neighbors[id]
    }

    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn adjacent(&self, a: NodeId, b: NodeId) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn edge_length(&self, a: NodeId, b: NodeId) -> f64 {
        self.positions[a].distance(self.positions[b])
    }

    pub fn is_connected(&self) -> bool {
        if self.positions.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &w in &self.neighbors[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Single-source metric distances (Dijkstra). Unreachable nodes get +inf.
    pub fn distances_from(&self, source: NodeId) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; self.len()];
        let mut heap = BinaryHeap::new();
        dist[source] = 0.0;
        heap.push(HeapItem {
            cost: 0.0,
            node: source,
        });
        while let Some(HeapItem { cost, node }) = heap.pop() {
            if cost > dist[node] {
                continue;
            }
            for &next in &self.neighbors[node] {
                let c = cost + self.edge_length(node, next);
                if c < dist[next] {
                    dist[next] = c;
                    heap.push(HeapItem { cost: c, node: next });
                }
            }
        }
        dist
    }

    /// Minimum-length path from `a` to `b`. Among equal-length paths the
    /// lexicographically smallest node-id sequence is returned.
    pub fn shortest_path(&self, a: NodeId, b: NodeId) -> Result<Trajectory> {
        if !self.contains(a) {
            return Err(Error::UnknownNode(a));
        }
        if !self.contains(b) {
            return Err(Error::UnknownNode(b));
        }
        let to_goal = self.distances_from(b);
        if !to_goal[a].is_finite() {
            return Err(Error::Unreachable { from: a, to: b });
        }
        let mut path = vec![a];
        let mut cur = a;
        while cur != b {
            let remaining = to_goal[cur];
            // Neighbors are sorted, so the first one on a shortest route is the
            // lexicographically smallest continuation.
            let next = self.neighbors[cur]
                .iter()
                .copied()
                .find(|&n| {
                    let via = self.edge_length(cur, n) + to_goal[n];
                    (via - remaining).abs() <= LENGTH_EPS * remaining.max(1.0)
                })
                .ok_or(Error::Unreachable { from: a, to: b })?;
            path.push(next);
            cur = next;
        }
        Ok(Trajectory(path))
    }

    /// Metric length of a walk.
    pub fn path_length(&self, nodes: &[NodeId]) -> f64 {
        nodes
            .windows(2)
            .map(|w| self.edge_length(w[0], w[1]))
            .sum()
    }
}

#[derive(PartialEq)]
struct HeapItem {
    cost: f64,
    node: NodeId,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Non-empty node sequence in which consecutive nodes are adjacent.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Trajectory(Vec<NodeId>);

impl Trajectory {
    pub fn new(nodes: Vec<NodeId>, graph: &NavGraph) -> Result<Self> {
        let t = Trajectory(nodes);
        t.validate(graph)?;
        Ok(t)
    }

    /// Wraps a node list without checking adjacency.
    pub fn from_nodes_unchecked(nodes: Vec<NodeId>) -> Self {
        Trajectory(nodes)
    }

    pub fn validate(&self, graph: &NavGraph) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::InvalidTrajectory("empty".into()));
        }
        if let Some(&bad) = self.0.iter().find(|&&n| !graph.contains(n)) {
            return Err(Error::UnknownNode(bad));
        }
        for w in self.0.windows(2) {
            if !graph.adjacent(w[0], w[1]) {
                return Err(Error::InvalidTrajectory(format!(
                    "nodes {} and {} are not adjacent",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.0
    }

    pub fn into_nodes(self) -> Vec<NodeId> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.0.len().saturating_sub(1)
    }

    pub fn first(&self) -> NodeId {
        self.0[0]
    }

    pub fn last(&self) -> NodeId {
        *self.0.last().expect("trajectory is non-empty")
    }

    pub fn position_of(&self, node: NodeId) -> Option<usize> {
        self.0.iter().position(|&n| n == node)
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.0.contains(&node)
    }
}
