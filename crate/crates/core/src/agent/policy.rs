//! Forward pass of the navigation policy on a [`Tape`], and the value-level
//! operations built on it.

use super::observe::{candidates, Candidate, ObservationSource, PanoramaFeatures};
use super::params::{PolicyParams, Slot, DIR_DIM};
use super::tape::{softmax, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::math::heading_between;
use crate::render::nearest_view;
use crate::worldgen::{NavGraph, NodeId, Trajectory};

pub const DEFAULT_MAX_STEPS: usize = 15;

/// Recurrent summary of the observations seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryState(pub Vec<f64>);

impl HistoryState {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Move(NodeId),
    Stop,
}

/// Probabilities over the candidate nodes followed by STOP.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    pub candidates: Vec<NodeId>,
    pub probs: Vec<f64>,
}

impl ActionDistribution {
    pub fn stop_prob(&self) -> f64 {
        *self.probs.last().expect("STOP is always present")
    }

    pub fn prob(&self, action: Action) -> f64 {
        match action {
            Action::Stop => self.stop_prob(),
            Action::Move(n) => self
                .candidates
                .iter()
                .position(|&c| c == n)
                .map_or(0.0, |i| self.probs[i]),
        }
    }

    /// Greedy choice. Candidates are scanned in ascending node id and only a
    /// strictly larger probability wins, so ties go to the smallest id and
    /// STOP (scanned last) loses every tie.
    pub fn argmax(&self) -> Action {
        argmax_action(&self.candidates, &self.probs)
    }
}

fn argmax_action(cands: &[NodeId], scores: &[f64]) -> Action {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by_key(|&i| cands[i]);
    order.push(cands.len());
    let mut best = order[0];
    for &i in &order[1..] {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    if best == cands.len() {
        Action::Stop
    } else {
        Action::Move(cands[best])
    }
}

/// Projected observation: one feature per candidate plus the pooled scene feature.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationEncoding {
    pub candidates: Vec<Vec<f64>>,
    pub pooled: Vec<f64>,
}

/// `[sin h, cos h, sin(h - arrival), cos(h - arrival)]`.
pub fn direction_features(heading: f64, arrival: f64) -> [f64; DIR_DIM] {
    let (s, c) = heading.sin_cos();
    let (sr, cr) = (heading - arrival).sin_cos();
    [s, c, sr, cr]
}

enum Cell {
    Instr,
    Hist,
}

/// The policy laid out on a tape. Parameter tensors are borrowed lazily.
pub struct Net<'p> {
    pub tape: Tape<'p>,
    params: &'p PolicyParams,
    vars: Vec<Option<Var>>,
    train: bool,
}

pub struct StepVars {
    pub logits: Var,
    pub history: Var,
}

impl<'p> Net<'p> {
    /// `train` makes parameter tensors require gradients.
    pub fn new(params: &'p PolicyParams, train: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            vars: vec![None; Slot::ALL.len()],
            train,
        }
    }

    pub fn params(&self) -> &'p PolicyParams {
        self.params
    }

    fn p(&mut self, slot: Slot) -> Var {
        let i = slot as usize;
        if let Some(v) = self.vars[i] {
            return v;
        }
        let v = self.tape.borrowed(self.params.get(slot), self.train);
        self.vars[i] = Some(v);
        v
    }

    fn gru(&mut self, cell: Cell, x: Var, h: Var) -> Var {
        use Slot::*;
        let [wz, wr, wn, uz, ur, un, bz, br, bn] = match cell {
            Cell::Instr => [InstrWz, InstrWr, InstrWn, InstrUz, InstrUr, InstrUn, InstrBz, InstrBr, InstrBn],
            Cell::Hist => [HistWz, HistWr, HistWn, HistUz, HistUr, HistUn, HistBz, HistBr, HistBn],
        }
        .map(|s| self.p(s));
        let t = &mut self.tape;
        let gate = |t: &mut Tape<'p>, w: Var, u: Var, b: Var| {
            let a = t.matvec(w, x);
            let c = t.matvec(u, h);
            let s = t.add(a, c);
            let s = t.add(s, b);
            t.sigmoid(s)
        };
        let z = gate(t, wz, uz, bz);
        let r = gate(t, wr, ur, br);
        let a = t.matvec(wn, x);
        let a = t.add(a, bn);
        let c = t.matvec(un, h);
        let c = t.mul(r, c);
        let n = t.add(a, c);
        let n = t.tanh(n);
        // h' = n + z * (h - n)
        let d = t.sub(h, n);
        let d = t.mul(z, d);
        t.add(n, d)
    }

    pub fn encode_instruction(&mut self, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::EmptyInstruction);
        }
        let (d, v) = (self.params.d(), self.params.vocab_size());
        if let Some(&t) = tokens.iter().find(|&&t| t >= v) {
            return Err(Error::Shape(format!("token id {t} outside vocabulary of {v}")));
        }
        let emb = self.p(Slot::Embedding);
        let mut h = self.tape.leaf(vec![0.0; d], false);
        let mut states = Vec::with_capacity(tokens.len());
        for &tok in tokens {
            let x = self.tape.row(emb, tok, d);
            h = self.gru(Cell::Instr, x, h);
            states.push(h);
        }
        Ok(self.tape.mean(&states))
    }

    /// Leaves for the 36 raw view features; views listed in `grad_views`
    /// track gradients.
    pub fn observation(&mut self, feats: &PanoramaFeatures, grad_views: &[usize]) -> Vec<Var> {
        feats
            .views
            .iter()
            .enumerate()
            .map(|(i, v)| self.tape.leaf(v.to_vec(), grad_views.contains(&i)))
            .collect()
    }

    /// Per-candidate features and the pooled scene feature.
    pub fn featurize(&mut self, views: &[Var], cands: &[Candidate], arrival: f64) -> (Vec<Var>, Var) {
        let (w, b, wd) = (self.p(Slot::ObsW), self.p(Slot::ObsB), self.p(Slot::DirW));
        let feats = cands
            .iter()
            .map(|c| {
                let view = views[nearest_view(c.heading, c.elevation)];
                let dir = self.tape.leaf(direction_features(c.heading, arrival).to_vec(), false);
                let t = &mut self.tape;
                let proj = t.matvec(w, view);
                let proj = t.add(proj, b);
                let dproj = t.matvec(wd, dir);
                t.add(proj, dproj)
            })
            .collect();
        let t = &mut self.tape;
        let mean = t.mean(views);
        let pooled = t.matvec(w, mean);
        let pooled = t.add(pooled, b);
        (feats, pooled)
    }

    pub fn update_history(&mut self, history: Var, pooled: Var) -> Var {
        self.gru(Cell::Hist, pooled, history)
    }

    /// Updates the history with the pooled feature, then scores every
    /// candidate and STOP against the fused state.
    pub fn decide(&mut self, instr: Var, history: Var, cand_feats: &[Var], pooled: Var) -> StepVars {
        let history = self.update_history(history, pooled);
        let (fw, fb, stop) = (self.p(Slot::FuseW), self.p(Slot::FuseB), self.p(Slot::Stop));
        let t = &mut self.tape;
        let cat = t.concat(&[instr, history, pooled]);
        let fused = t.matvec(fw, cat);
        let fused = t.add(fused, fb);
        let fused = t.tanh(fused);
        let mut scores: Vec<Var> = cand_feats.iter().map(|&c| t.dot(fused, c)).collect();
        scores.push(t.dot(fused, stop));
        let logits = t.concat(&scores);
        StepVars { logits, history }
    }

    /// Full step from raw view leaves.
    pub fn step(
        &mut self,
        instr: Var,
        history: Var,
        views: &[Var],
        cands: &[Candidate],
        arrival: f64,
    ) -> StepVars {
        let (feats, pooled) = self.featurize(views, cands, arrival);
        self.decide(instr, history, &feats, pooled)
    }

    /// Parameter gradients in slot order; unused tensors get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Vec<f64>> {
        Slot::ALL
            .iter()
            .map(|&s| {
                self.vars[s as usize]
                    .and_then(|v| grads.get(v))
                    .map_or_else(|| vec![0.0; self.params.get(s).len()], <[f64]>::to_vec)
            })
            .collect()
    }
}

pub fn encode_instruction(tokens: &[usize], params: &PolicyParams) -> Result<Vec<f64>> {
    let mut net = Net::new(params, false);
    let v = net.encode_instruction(tokens)?;
    Ok(net.tape.value(v).to_vec())
}

pub fn featurize_observation(
    feats: &PanoramaFeatures,
    cands: &[Candidate],
    arrival: f64,
    params: &PolicyParams,
) -> Result<ObservationEncoding> {
    feats.validate()?;
    let mut net = Net::new(params, false);
    let views = net.observation(feats, &[]);
    let (c, p) = net.featurize(&views, cands, arrival);
    Ok(ObservationEncoding {
        candidates: c.iter().map(|&v| net.tape.value(v).to_vec()).collect(),
        pooled: net.tape.value(p).to_vec(),
    })
}

pub fn policy_step(
    instr: &[f64],
    history: &HistoryState,
    obs: &ObservationEncoding,
    cand_nodes: &[NodeId],
    params: &PolicyParams,
) -> Result<(ActionDistribution, HistoryState)> {
    if cand_nodes.is_empty() || cand_nodes.len() != obs.candidates.len() {
        return Err(Error::Shape(format!(
            "{} candidate nodes for {} candidate features",
            cand_nodes.len(),
            obs.candidates.len()
        )));
    }
    let mut net = Net::new(params, false);
    let t = &mut net.tape;
    let i = t.leaf(instr.to_vec(), false);
    let h = t.leaf(history.0.clone(), false);
    let feats: Vec<Var> = obs.candidates.iter().map(|c| t.leaf(c.clone(), false)).collect();
    let pooled = t.leaf(obs.pooled.clone(), false);
    let out = net.decide(i, h, &feats, pooled);
    Ok((
        ActionDistribution {
            candidates: cand_nodes.to_vec(),
            probs: softmax(net.tape.value(out.logits)),
        },
        HistoryState(net.tape.value(out.history).to_vec()),
    ))
}

/// One decision at `node` given the history before observing it.
fn decide_at(
    params: &PolicyParams,
    obs: &dyn ObservationSource,
    graph: &NavGraph,
    instr: &[f64],
    history: &HistoryState,
    node: NodeId,
    arrival: f64,
) -> Result<(ActionDistribution, HistoryState)> {
    let feats = obs.features(node)?;
    let cands = candidates(graph, node);
    let mut net = Net::new(params, false);
    let views = net.observation(&feats, &[]);
    let i = net.tape.leaf(instr.to_vec(), false);
    let h = net.tape.leaf(history.0.clone(), false);
    let out = net.step(i, h, &views, &cands, arrival);
    Ok((
        ActionDistribution {
            candidates: cands.iter().map(|c| c.node).collect(),
            probs: softmax(net.tape.value(out.logits)),
        },
        HistoryState(net.tape.value(out.history).to_vec()),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutOutcome {
    pub trajectory: Trajectory,
    /// History after observing the final node.
    pub history: HistoryState,
    /// Whether the first decision was STOP.
    pub stopped_immediately: bool,
}

/// Greedy rollout from `start`, given the history before observing `start`
/// and the heading of the move that arrived there. The trajectory holds at
/// most `max_steps` nodes.
#[allow(clippy::too_many_arguments)]
pub fn rollout_from(
    params: &PolicyParams,
    obs: &dyn ObservationSource,
    graph: &NavGraph,
    instr: &[f64],
    start: NodeId,
    history: HistoryState,
    arrival: f64,
    max_steps: usize,
) -> Result<RolloutOutcome> {
    if !graph.contains(start) {
        return Err(Error::UnknownNode(start));
    }
    let mut nodes = vec![start];
    let mut history = history;
    let mut arrival = arrival;
    loop {
        let here = *nodes.last().expect("non-empty");
        if nodes.len() >= max_steps.max(1) {
            // Cap reached: the node is observed but no decision is taken.
            history = observe_only(params, obs, &history, here)?;
            return Ok(RolloutOutcome {
                trajectory: Trajectory::from_nodes_unchecked(nodes),
                history,
                stopped_immediately: false,
            });
        }
        let (dist, h) = decide_at(params, obs, graph, instr, &history, here, arrival)?;
        history = h;
        match dist.argmax() {
            Action::Stop => {
                let stopped_immediately = nodes.len() == 1;
                return Ok(RolloutOutcome {
                    trajectory: Trajectory::from_nodes_unchecked(nodes),
                    history,
                    stopped_immediately,
                });
            }
            Action::Move(next) => {
                arrival = heading_between(graph.position(here), graph.position(next));
                nodes.push(next);
            }
        }
    }
}

fn observe_only(
    params: &PolicyParams,
    obs: &dyn ObservationSource,
    history: &HistoryState,
    node: NodeId,
) -> Result<HistoryState> {
    let feats = obs.features(node)?;
    let mut net = Net::new(params, false);
    let views = net.observation(&feats, &[]);
    let (_, pooled) = net.featurize(&views, &[], 0.0);
    let h = net.tape.leaf(history.0.clone(), false);
    let h = net.update_history(h, pooled);
    Ok(HistoryState(net.tape.value(h).to_vec()))
}

/// Greedy rollout of an instruction from `start` with a fresh history.
pub fn rollout(
    params: &PolicyParams,
    obs: &dyn ObservationSource,
    graph: &NavGraph,
    tokens: &[usize],
    start: NodeId,
    max_steps: usize,
) -> Result<Trajectory> {
    let instr = encode_instruction(tokens, params)?;
    let h = HistoryState::zeros(params.d());
    Ok(rollout_from(params, obs, graph, &instr, start, h, 0.0, max_steps)?.trajectory)
}

/// History after observing every node of `nodes` in order, and the heading
/// of the last move (0 when there was none). `nodes` may be empty.
pub fn forced_history(
    params: &PolicyParams,
    obs: &dyn ObservationSource,
    graph: &NavGraph,
    nodes: &[NodeId],
) -> Result<(HistoryState, f64)> {
    for w in nodes.windows(2) {
        if !graph.adjacent(w[0], w[1]) {
            return Err(Error::InvalidTrajectory(format!("{} and {} are not adjacent", w[0], w[1])));
        }
    }
    let mut net = Net::new(params, false);
    let mut h = net.tape.leaf(vec![0.0; params.d()], false);
    for &n in nodes {
        if !graph.contains(n) {
            return Err(Error::UnknownNode(n));
        }
        let feats = obs.features(n)?;
        let views = net.observation(&feats, &[]);
        let (_, pooled) = net.featurize(&views, &[], 0.0);
        h = net.update_history(h, pooled);
    }
    let arrival = match nodes {
        [.., a, b] => heading_between(graph.position(*a), graph.position(*b)),
        _ => 0.0,
    };
    Ok((HistoryState(net.tape.value(h).to_vec()), arrival))
}

/// Teacher-forces the policy along `prefix` and returns the history after
/// its last node. The history depends on observations only, so no
/// instruction is needed.
pub fn forced_rollout(
    params: &PolicyParams,
    obs: &dyn ObservationSource,
    graph: &NavGraph,
    prefix: &Trajectory,
) -> Result<HistoryState> {
    prefix.validate(graph)?;
    Ok(forced_history(params, obs, graph, prefix.nodes())?.0)
}

/// Teacher-forced mean cross-entropy of one episode on a training tape.
/// Returns the loss variable and the number of decisions.
pub fn episode_loss(
    net: &mut Net<'_>,
    obs: &dyn ObservationSource,
    graph: &NavGraph,
    tokens: &[usize],
    trajectory: &Trajectory,
) -> Result<Var> {
    let instr = net.encode_instruction(tokens)?;
    let mut h = net.tape.leaf(vec![0.0; net.params().d()], false);
    let mut arrival = 0.0;
    let nodes = trajectory.nodes();
    let mut losses = Vec::with_capacity(nodes.len());
    for (k, &node) in nodes.iter().enumerate() {
        let cands = candidates(graph, node);
        let target = match nodes.get(k + 1) {
            Some(next) => cands.iter().position(|c| c.node == *next).ok_or_else(|| {
                Error::InvalidTrajectory(format!("{node} and {next} are not adjacent"))
            })?,
            None => cands.len(),
        };
        let feats = obs.features(node)?;
        let views = net.observation(&feats, &[]);
        let out = net.step(instr, h, &views, &cands, arrival);
        h = out.history;
        losses.push(net.tape.neg_log_softmax(out.logits, target));
        if let Some(&next) = nodes.get(k + 1) {
            arrival = heading_between(graph.position(node), graph.position(next));
        }
    }
    Ok(net.tape.mean(&losses))
}
