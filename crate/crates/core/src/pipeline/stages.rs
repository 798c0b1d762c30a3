//! The pipeline stages, from world generation to ablation sweeps.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Stage};
use super::store::{
    atomic_write, check_hash, read_existing, read_json, read_texture, write_json, write_texture, Layout,
};
use super::summary::report;
use crate::agent::{
    train_bc, BcExample, ObservationSource, PolicyParams, RenderedObservations, Vocabulary, World,
};
use crate::attack::{
    build_attack_instance, candidate_objects, optimize_attack, AttackConfig, AttackInstance, AttackMode,
    AttackSetup, AttackedObservations, CheckpointRecord, ObjectViews, Rejection,
};
use crate::error::{Error, Result};
use crate::eval::{
    competence, evaluate_instance, export_factors, instance_factors, Competence, MetricsReport, Reference,
};
use crate::worldgen::{
    generate_episodes, generate_world, Category, Episode, EpisodeId, NavGraph, Scene,
    INSTRUCTIONS_PER_TRAJECTORY,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenWorld,
    TrainAgent,
    BuildAttacks,
    Attack,
    Eval,
    Ablate,
    Report,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::GenWorld,
        Command::TrainAgent,
        Command::BuildAttacks,
        Command::Attack,
        Command::Eval,
        Command::Ablate,
        Command::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenWorld => "gen-world",
            Command::TrainAgent => "train-agent",
            Command::BuildAttacks => "build-attacks",
            Command::Attack => "attack",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::Report => "report",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::config("command", format!("unknown command {s:?}")))
    }
}

/// Validates `cfg` and runs one stage on a pool of `cfg.run.workers` threads.
pub fn run(command: Command, cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.workers)
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))?;
    pool.install(|| match command {
        Command::GenWorld => gen_world(cfg),
        Command::TrainAgent => train_agent(cfg),
        Command::BuildAttacks => build_attacks(cfg),
        Command::Attack => attack(cfg),
        Command::Eval => eval(cfg),
        Command::Ablate => ablate(cfg),
        Command::Report => report(cfg),
    })
}

/// One generated environment. The texture atlas is stored beside it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldDoc {
    pub env_id: u32,
    pub world_seed: u64,
    pub scene: Scene,
    pub graph: NavGraph,
    /// Episodes available for agent training and as attack support.
    pub train: Vec<Episode>,
    /// Trailing episodes never seen by the agent; attack test episodes.
    pub held_out: Vec<Episode>,
}

/// Index where the held-out tail starts, on a trajectory boundary when
/// that leaves both parts non-empty.
fn held_out_start(n: usize, fraction: f64) -> usize {
    let cut = (n - (n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let aligned = cut - cut % INSTRUCTIONS_PER_TRAJECTORY;
    if aligned >= 1 {
        aligned
    } else {
        cut
    }
}

pub fn gen_world(cfg: &RunConfig) -> Result<()> {
    let layout = Layout::new(&cfg.run.out_dir);
    let hash = cfg.stage_hash(Stage::World);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seeds: Vec<(u64, u64)> = (0..cfg.episodes.worlds)
        .map(|_| (rng.next_u64(), rng.next_u64()))
        .collect();
    seeds
        .into_par_iter()
        .enumerate()
        .try_for_each(|(env, (world_seed, episode_seed))| {
            let env_id = env as u32;
            let (scene, graph) = generate_world(world_seed, &cfg.world)?;
            let mut episodes = generate_episodes(&graph, &scene, env_id, cfg.episodes.per_world, episode_seed)?;
            let n = episodes.len();
            if n < 2 {
                return Err(Error::GraphTooSmall(format!("world {env_id} yields {n} episodes")));
            }
            let held_out = episodes.split_off(held_out_start(n, cfg.episodes.held_out_fraction));
            write_texture(&layout.world_texture(env_id), &scene.atlas)?;
            let doc = WorldDoc {
                env_id,
                world_seed,
                scene,
                graph,
                train: episodes,
                held_out,
            };
            log::info!(
                "world {env_id}: {} nodes, {} train / {} held-out episodes",
                doc.graph.len(),
                doc.train.len(),
                doc.held_out.len()
            );
            write_json(&layout.world_json(env_id), &hash, &doc)
        })
}

/// Reads every world with its atlas.
pub fn load_worlds(cfg: &RunConfig) -> Result<Vec<WorldDoc>> {
    let layout = Layout::new(&cfg.run.out_dir);
    let hash = cfg.stage_hash(Stage::World);
    (0..cfg.episodes.worlds as u32)
        .map(|env| {
            let mut doc: WorldDoc = read_json(&layout.world_json(env), &hash)?;
            doc.scene.atlas = read_texture(&layout.world_texture(env))?;
            doc.scene.validate()?;
            Ok(doc)
        })
        .collect()
}

fn observations<'a>(docs: &'a [WorldDoc], cfg: &RunConfig) -> Result<Vec<RenderedObservations<'a>>> {
    docs.iter()
        .map(|d| RenderedObservations::new(&d.scene, &d.graph, &cfg.render))
        .collect()
}

fn prefetch(docs: &[WorldDoc], obs: &[RenderedObservations<'_>]) -> Result<()> {
    for (d, o) in docs.iter().zip(obs) {
        (0..d.graph.len())
            .into_par_iter()
            .try_for_each(|n| o.features(n).map(drop))?;
    }
    Ok(())
}

fn world_index(docs: &[WorldDoc], env_id: u32) -> Result<usize> {
    docs.iter()
        .position(|d| d.env_id == env_id)
        .ok_or_else(|| Error::MissingArtifact(format!("world {env_id}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompetenceDoc {
    #[serde(flatten)]
    pub competence: Competence,
    pub passed: bool,
    pub epoch_losses: Vec<f64>,
}

pub fn train_agent(cfg: &RunConfig) -> Result<()> {
    let layout = Layout::new(&cfg.run.out_dir);
    let hash = cfg.stage_hash(Stage::Agent);
    let docs = load_worlds(cfg)?;
    let obs = observations(&docs, cfg)?;
    prefetch(&docs, &obs)?;
    let worlds: Vec<World<'_>> = docs
        .iter()
        .zip(&obs)
        .map(|(d, o)| World {
            graph: &d.graph,
            observations: o,
        })
        .collect();
    let vocab = Vocabulary::default();
    let examples: Vec<BcExample> = docs
        .iter()
        .enumerate()
        .flat_map(|(w, d)| {
            d.train.iter().map(move |e| (w, e))
        })
        .map(|(w, e)| BcExample {
            world: w,
            tokens: vocab.encode(&e.instruction),
            trajectory: e.trajectory.clone(),
        })
        .collect();
    let init = PolicyParams::random(vocab.len(), cfg.agent.d, cfg.seed);
    let (params, rep) = train_bc(&init, &worlds, &examples, &cfg.agent.train_options(cfg.seed))?;
    atomic_write(&layout.params(), &params.to_bytes(Some(hash.clone())))?;
    let held: Vec<(usize, &Episode)> = docs
        .iter()
        .enumerate()
        .flat_map(|(w, d)| d.held_out.iter().map(move |e| (w, e)))
        .collect();
    let comp = competence(&params, &vocab, &worlds, &held)?;
    let passed = comp.passed();
    log::info!(
        "competence on {} held-out episodes: SR {:.1}%, nDTW {:.3} ({})",
        comp.episodes,
        comp.sr_pct,
        comp.ndtw,
        if passed { "passed" } else { "FAILED" }
    );
    write_json(
        &layout.competence(),
        &hash,
        &CompetenceDoc {
            competence: comp,
            passed,
            epoch_losses: rep.epoch_losses,
        },
    )
}

pub fn load_params(cfg: &RunConfig) -> Result<PolicyParams> {
    let path = Layout::new(&cfg.run.out_dir).params();
    let bytes = read_existing(&path)?;
    let shown = path.display().to_string();
    let (params, header) = PolicyParams::read_from(&bytes[..], &shown)?;
    check_hash(&path, header.config_hash.as_deref().unwrap_or(""), &cfg.stage_hash(Stage::Agent))?;
    let v = Vocabulary::default().len();
    if params.vocab_size() != v {
        return Err(Error::Corrupt {
            path: shown,
            message: format!("vocabulary size {} differs from {v}", params.vocab_size()),
        });
    }
    Ok(params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionRecord {
    pub episode_id: EpisodeId,
    pub env_id: u32,
    pub reason: Rejection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSet {
    pub mode: AttackMode,
    pub instances: Vec<AttackInstance>,
}

/// Scans held-out episodes in order, one per distinct trajectory, until
/// `max_instances` are accepted.
pub fn build_attacks(cfg: &RunConfig) -> Result<()> {
    let layout = Layout::new(&cfg.run.out_dir);
    let hash = cfg.stage_hash(Stage::Instances);
    let mode = cfg.attack.mode;
    let docs = load_worlds(cfg)?;
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    'worlds: for d in &docs {
        let cands = candidate_objects(&d.scene, &d.graph, &cfg.render)?;
        let mut seen = HashSet::new();
        for test in &d.held_out {
            if !seen.insert(test.trajectory.clone()) {
                continue;
            }
            match build_attack_instance(test, &d.train, &d.scene, &d.graph, &cands, mode)? {
                Ok(inst) => {
                    accepted.push(inst);
                    if accepted.len() >= cfg.build.max_instances {
                        break 'worlds;
                    }
                }
                Err(reason) => rejected.push(RejectionRecord {
                    episode_id: test.id,
                    env_id: d.env_id,
                    reason,
                }),
            }
        }
    }
    log::info!("{mode}: {} instances accepted, {} rejected", accepted.len(), rejected.len());
    write_json(&layout.rejections(mode), &hash, &rejected)?;
    write_json(
        &layout.instances(mode),
        &hash,
        &InstanceSet {
            mode,
            instances: accepted,
        },
    )
}

pub fn load_instances(cfg: &RunConfig) -> Result<Vec<AttackInstance>> {
    let layout = Layout::new(&cfg.run.out_dir);
    let set: InstanceSet = read_json(&layout.instances(cfg.attack.mode), &cfg.stage_hash(Stage::Instances))?;
    Ok(set.instances)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackLog {
    pub instance_id: u64,
    pub best_iteration: usize,
    pub initial_loss: f64,
    pub checkpoints: Vec<CheckpointRecord>,
}

/// The `[attack]` section with the run-seeded RNG.
fn attack_config(cfg: &RunConfig) -> AttackConfig {
    AttackConfig {
        seed: cfg.attack_seed(),
        ..cfg.attack.clone()
    }
}

pub fn attack(cfg: &RunConfig) -> Result<()> {
    let layout = Layout::new(&cfg.run.out_dir);
    let hash = cfg.stage_hash(Stage::Attack);
    let mode = cfg.attack.mode;
    match read_json::<CompetenceDoc>(&layout.competence(), &cfg.stage_hash(Stage::Agent)) {
        Ok(c) if !c.passed => log::warn!(
            "agent failed the competence gate (SR {:.1}%, nDTW {:.3}); attacking anyway",
            c.competence.sr_pct,
            c.competence.ndtw
        ),
        Ok(_) => {}
        Err(e) => log::warn!("competence record unavailable: {e}"),
    }
    let params = load_params(cfg)?;
    let docs = load_worlds(cfg)?;
    let instances = load_instances(cfg)?;
    let obs = observations(&docs, cfg)?;
    let vocab = Vocabulary::default();
    let config = attack_config(cfg);
    instances.par_iter().try_for_each(|inst| {
        let log_path = layout.checkpoint_log(mode, inst.id);
        let tex_path = layout.attacked_texture(mode, inst.id);
        if read_json::<AttackLog>(&log_path, &hash).is_ok() && tex_path.exists() {
            log::info!("instance {}: already attacked", inst.id);
            return Ok(());
        }
        let w = world_index(&docs, inst.env_id)?;
        let setup = AttackSetup {
            params: &params,
            vocab: &vocab,
            scene: &docs[w].scene,
            graph: &docs[w].graph,
            clean: &obs[w],
            spec: &cfg.render,
        };
        let run = optimize_attack(&setup, inst, &config, &mut |_, _| {})?;
        log::info!(
            "instance {}: best iteration {} (initial loss {:.3})",
            inst.id,
            run.best_iteration,
            run.initial_loss
        );
        write_texture(&tex_path, &run.atlas)?;
        write_json(
            &log_path,
            &hash,
            &AttackLog {
                instance_id: inst.id,
                best_iteration: run.best_iteration,
                initial_loss: run.initial_loss,
                checkpoints: run.checkpoints,
            },
        )
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    /// The instance's own held-out test episode.
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn episodes(self, inst: &AttackInstance) -> Vec<Episode> {
        match self {
            Split::Train => inst.train_split.clone(),
            Split::Val => inst.val_split.clone(),
            Split::Test => vec![inst.test_episode.clone()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub split: Split,
    pub attacked: bool,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceEval {
    pub instance_id: u64,
    pub env_id: u32,
    pub category: Category,
    pub conditions: Vec<Condition>,
}

impl InstanceEval {
    pub fn get(&self, split: Split, attacked: bool, reference: Reference) -> Option<&MetricsReport> {
        self.conditions
            .iter()
            .find(|c| c.split == split && c.attacked == attacked && c.report.reference == reference)
            .map(|c| &c.report)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDoc {
    pub mode: AttackMode,
    pub instances: Vec<InstanceEval>,
}

fn read_attacked(cfg: &RunConfig, inst: &AttackInstance) -> Result<crate::worldgen::TextureAtlas> {
    let layout = Layout::new(&cfg.run.out_dir);
    let mode = cfg.attack.mode;
    let missing = |e: Error| match e {
        Error::MissingArtifact(path) => {
            Error::MissingArtifact(format!("no attacked atlas found for instance {} ({path})", inst.id))
        }
        e => e,
    };
    read_json::<AttackLog>(&layout.checkpoint_log(mode, inst.id), &cfg.stage_hash(Stage::Attack)).map_err(missing)?;
    read_texture(&layout.attacked_texture(mode, inst.id)).map_err(missing)
}

/// Clean and attacked rollouts of every split against both references,
/// plus the factor table over test episodes.
pub fn eval(cfg: &RunConfig) -> Result<()> {
    let layout = Layout::new(&cfg.run.out_dir);
    let mode = cfg.attack.mode;
    let instances = load_instances(cfg)?;
    let atlases = instances
        .iter()
        .map(|i| read_attacked(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    let params = load_params(cfg)?;
    let docs = load_worlds(cfg)?;
    let obs = observations(&docs, cfg)?;
    let vocab = Vocabulary::default();
    let mut evals = Vec::with_capacity(instances.len());
    let mut factors = Vec::with_capacity(instances.len());
    for (inst, atlas) in instances.iter().zip(&atlases) {
        let w = world_index(&docs, inst.env_id)?;
        let (scene, graph) = (&docs[w].scene, &docs[w].graph);
        let views = ObjectViews::build(scene, graph, inst.attack_object, &cfg.render)?;
        let attacked = AttackedObservations::new(&obs[w], &views, atlas);
        let mut conditions = Vec::new();
        for split in Split::ALL {
            let episodes = split.episodes(inst);
            for is_attacked in [false, true] {
                let source: &dyn ObservationSource = if is_attacked { &attacked } else { &obs[w] };
                for reference in [Reference::Attack, Reference::Original] {
                    let report = evaluate_instance(&params, &vocab, graph, source, inst, &episodes, reference)?;
                    conditions.push(Condition {
                        split,
                        attacked: is_attacked,
                        report,
                    });
                }
            }
        }
        factors.push(instance_factors(inst, scene, graph, &cfg.render, cfg.attack.steps_rendered)?);
        evals.push(InstanceEval {
            instance_id: inst.id,
            env_id: inst.env_id,
            category: inst.category,
            conditions,
        });
    }
    let pick = |attacked: bool| -> Vec<MetricsReport> {
        evals
            .iter()
            .map(|e| e.get(Split::Test, attacked, Reference::Attack).expect("evaluated").clone())
            .collect()
    };
    let mut csv = Vec::new();
    export_factors(&factors, &pick(false), &pick(true), &mut csv)?;
    atomic_write(&layout.factors(mode), &csv)?;
    write_json(
        &layout.evaluation(mode),
        &cfg.stage_hash(Stage::Attack),
        &EvalDoc {
            mode,
            instances: evals,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `steps_rendered`, `epsilon`, `instructions` or `iterations`.
    pub variable: String,
    pub value: f64,
    pub instance_id: u64,
    /// Train-split metrics against the attack reference.
    pub clean_ndtw: f64,
    pub attacked_ndtw: f64,
    pub clean_sr_pct: f64,
    pub attacked_sr_pct: f64,
    pub clean_stop_rate_pct: f64,
    pub attacked_stop_rate_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationDoc {
    pub mode: AttackMode,
    pub rows: Vec<AblationRow>,
}

struct Variant {
    variable: &'static str,
    value: f64,
    config: AttackConfig,
    /// Training instructions per trajectory: templates below this index.
    instructions: usize,
}

/// Varies one attack hyperparameter at a time on the first instances,
/// scoring the train split. Identical settings are optimized once.
pub fn ablate(cfg: &RunConfig) -> Result<()> {
    let layout = Layout::new(&cfg.run.out_dir);
    let ab = &cfg.ablation;
    let base = attack_config(cfg);
    let all = INSTRUCTIONS_PER_TRAJECTORY;
    let mut variants = Vec::new();
    let mut push = |variable, value: f64, f: &dyn Fn(&mut AttackConfig), instructions| {
        let mut config = base.clone();
        f(&mut config);
        variants.push(Variant {
            variable,
            value,
            config,
            instructions,
        });
    };
    for &s in &ab.steps_rendered {
        push("steps_rendered", s as f64, &|c| c.steps_rendered = s, all);
    }
    for &e in &ab.epsilon {
        push("epsilon", e, &|c| c.epsilon = e, all);
    }
    for &k in &ab.instructions {
        push("instructions", k as f64, &|_| {}, k);
    }
    for &it in &ab.iterations {
        push("iterations", it as f64, &|c| c.iterations = it, all);
    }

    let mut instances = load_instances(cfg)?;
    instances.truncate(ab.instances);
    let params = load_params(cfg)?;
    let docs = load_worlds(cfg)?;
    let obs = observations(&docs, cfg)?;
    let vocab = Vocabulary::default();

    let key = |v: &Variant| format!("{}|{}", serde_json::to_string(&v.config).expect("serializes"), v.instructions);
    let mut jobs: BTreeMap<(String, usize), (&Variant, usize)> = BTreeMap::new();
    for v in &variants {
        for i in 0..instances.len() {
            jobs.entry((key(v), i)).or_insert((v, i));
        }
    }
    let jobs: Vec<_> = jobs.into_iter().collect();
    let results = jobs
        .par_iter()
        .map(|(k, (v, i))| {
            let inst = &instances[*i];
            let w = world_index(&docs, inst.env_id)?;
            let (scene, graph) = (&docs[w].scene, &docs[w].graph);
            let mut trimmed = inst.clone();
            trimmed.train_split.retain(|e| e.template < v.instructions);
            if trimmed.train_split.is_empty() {
                log::warn!("instance {}: no training episodes with {} instructions", inst.id, v.instructions);
                return Ok((k.clone(), None));
            }
            let setup = AttackSetup {
                params: &params,
                vocab: &vocab,
                scene,
                graph,
                clean: &obs[w],
                spec: &cfg.render,
            };
            let run = optimize_attack(&setup, &trimmed, &v.config, &mut |_, _| {})?;
            let views = ObjectViews::build(scene, graph, inst.attack_object, &cfg.render)?;
            let attacked = AttackedObservations::new(&obs[w], &views, &run.atlas);
            let r = evaluate_instance(
                &params,
                &vocab,
                graph,
                &attacked,
                inst,
                &inst.train_split,
                Reference::Attack,
            )?;
            Ok((k.clone(), Some(r)))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let clean = instances
        .iter()
        .map(|inst| {
            let w = world_index(&docs, inst.env_id)?;
            evaluate_instance(
                &params,
                &vocab,
                &docs[w].graph,
                &obs[w],
                inst,
                &inst.train_split,
                Reference::Attack,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for v in &variants {
        for (i, inst) in instances.iter().enumerate() {
            let Some(Some(post)) = results.get(&(key(v), i)) else { continue };
            let pre = &clean[i];
            rows.push(AblationRow {
                variable: v.variable.to_string(),
                value: v.value,
                instance_id: inst.id,
                clean_ndtw: pre.mean_ndtw(),
                attacked_ndtw: post.mean_ndtw(),
                clean_sr_pct: pre.sr_pct,
                attacked_sr_pct: post.sr_pct,
                clean_stop_rate_pct: pre.stop_rate_pct,
                attacked_stop_rate_pct: post.stop_rate_pct,
            });
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    atomic_write(&layout.ablation_csv(), &bytes)?;
    write_json(
        &layout.ablation(),
        &cfg.stage_hash(Stage::Ablation),
        &AblationDoc {
            mode: cfg.attack.mode,
            rows,
        },
    )
}
