use vln_hijack::agent::{BcExample, PolicyParams, RenderedObservations, Vocabulary, World};
use vln_hijack::attack::{build_attack_instance, candidate_objects, AttackInstance, AttackMode};
use vln_hijack::math::Vec3;
use vln_hijack::render::PanoramaSpec;
use vln_hijack::worldgen::{
    generate_episodes, generate_world, Category, Episode, NavGraph, Scene, SceneBuilder, TextureAtlas,
    Trajectory, WorldParams,
};

/// A 3x3-room world with small panoramas.
pub struct Fixture {
    pub scene: Scene,
    pub graph: NavGraph,
    pub train: Vec<Episode>,
    pub held_out: Vec<Episode>,
    pub spec: PanoramaSpec,
}

pub fn small_spec() -> PanoramaSpec {
    PanoramaSpec {
        width: 16,
        height: 16,
        ..PanoramaSpec::default()
    }
}

pub fn small_world(seed: u64, episodes: usize) -> Fixture {
    let params = WorldParams {
        rooms_x: 3,
        rooms_y: 3,
        ..WorldParams::default()
    };
    let (scene, graph) = generate_world(seed, &params).unwrap();
    let mut train = generate_episodes(&graph, &scene, 0, episodes, seed).unwrap();
    let held_out = train.split_off(train.len() * 4 / 5 / 3 * 3);
    Fixture {
        scene,
        graph,
        train,
        held_out,
        spec: small_spec(),
    }
}

impl Fixture {
    pub fn observations(&self) -> RenderedObservations<'_> {
        RenderedObservations::new(&self.scene, &self.graph, &self.spec).unwrap()
    }

    pub fn examples(&self, episodes: &[Episode]) -> Vec<BcExample> {
        let vocab = Vocabulary::default();
        episodes
            .iter()
            .map(|e| BcExample {
                world: 0,
                tokens: vocab.encode(&e.instruction),
                trajectory: e.trajectory.clone(),
            })
            .collect()
    }

    pub fn world<'a>(&'a self, obs: &'a RenderedObservations<'a>) -> World<'a> {
        World {
            graph: &self.graph,
            observations: obs,
        }
    }

    /// Accepted attack instances from held-out episodes, one per trajectory.
    pub fn instances(&self, mode: AttackMode, max: usize) -> Vec<AttackInstance> {
        let cands = candidate_objects(&self.scene, &self.graph, &self.spec).unwrap();
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for test in &self.held_out {
            if out.len() == max {
                break;
            }
            if !seen.insert(test.trajectory.clone()) {
                continue;
            }
            if let Ok(inst) = build_attack_instance(test, &self.train, &self.scene, &self.graph, &cands, mode).unwrap() {
                out.push(inst);
            }
        }
        out
    }
}

/// Zero params except a fused bias and STOP embedding that make STOP win.
pub fn stop_params(vocab_size: usize, d: usize) -> PolicyParams {
    use vln_hijack::agent::Slot;
    let mut p = PolicyParams::zeros(vocab_size, d);
    p.get_mut(Slot::FuseB).fill(1.0);
    p.get_mut(Slot::Stop).fill(10.0);
    p
}

pub fn episode(id: u64, nodes: &[usize]) -> Episode {
    Episode {
        id,
        env_id: 0,
        instruction: vec!["go".into(), "forward".into()],
        trajectory: Trajectory::from_nodes_unchecked(nodes.to_vec()),
        template: 0,
    }
}

/// Nodes on the x axis `spacing` meters apart, joined in a line, with two
/// small boxes so object ids 0 and 1 exist.
pub fn line_world(n: usize, spacing: f64) -> (Scene, NavGraph) {
    let positions = (0..n).map(|i| Vec3::new(i as f64 * spacing, 0.0, 0.0)).collect();
    let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
    let graph = NavGraph::new(positions, &edges).unwrap();
    let mut b = SceneBuilder::new(TextureAtlas::filled(8, 8, [0.5; 3]));
    for (k, cat) in [Category::Sofa, Category::Plant].into_iter().enumerate() {
        let y = 2.0 + k as f64;
        let quad = [
            Vec3::new(0.0, y, 0.0),
            Vec3::new(1.0, y, 0.0),
            Vec3::new(1.0, y, 1.0),
            Vec3::new(0.0, y, 1.0),
        ];
        b.object(cat, &[(quad, [0.0, 0.0, 0.5, 0.5])]);
    }
    (b.build().unwrap(), graph)
}
