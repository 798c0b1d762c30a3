//! Run configuration: TOML sections with defaults, environment overrides
//! and per-stage content hashes.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{TrainOptions, DEFAULT_D};
use crate::attack::AttackConfig;
use crate::error::{Error, Result};
use crate::render::PanoramaSpec;
use crate::worldgen::{WorldParams, INSTRUCTIONS_PER_TRAJECTORY};

/// Prefix of environment variables that override config keys:
/// `VHL_SEED`, `VHL_ATTACK_EPSILON`, `VHL_AGENT_EPOCHS`, ...
pub const ENV_PREFIX: &str = "VHL_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    /// Seeds world generation, episode sampling and agent initialization.
    pub seed: u64,
    pub world: WorldParams,
    pub episodes: EpisodeConfig,
    pub render: PanoramaSpec,
    pub agent: AgentConfig,
    pub attack: AttackConfig,
    pub build: BuildConfig,
    pub ablation: AblationConfig,
    pub run: RunSection,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    /// Number of generated environments.
    pub worlds: usize,
    pub per_world: usize,
    /// Trailing fraction of each world's episodes held out from agent
    /// training; attack test episodes come from here.
    pub held_out_fraction: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            worlds: 1,
            per_world: 1300,
            held_out_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub d: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        let t = TrainOptions::default();
        Self {
            d: DEFAULT_D,
            epochs: t.epochs,
            lr: t.lr,
            batch_size: t.batch_size,
            clip_norm: t.clip_norm,
        }
    }
}

impl AgentConfig {
    pub fn train_options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed,
            clip_norm: self.clip_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuildConfig {
    /// Upper bound on accepted attack instances per mode.
    pub max_instances: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self { max_instances: 20 }
    }
}

/// One-variable-at-a-time sweep grids around the `[attack]` baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Size of the fixed instance subset (first trajectory instances).
    pub instances: usize,
    pub steps_rendered: Vec<usize>,
    pub epsilon: Vec<f64>,
    /// Instructions per training trajectory used during optimization.
    pub instructions: Vec<usize>,
    pub iterations: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            instances: 5,
            steps_rendered: vec![1, 2, 3],
            epsilon: vec![0.1, 0.3, 0.5],
            instructions: vec![1, 2, 3],
            iterations: vec![300, 600, 900],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub out_dir: PathBuf,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            workers: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.render.validate()?;
        self.attack.validate()?;
        let e = &self.episodes;
        if e.worlds == 0 || e.worlds > u32::MAX as usize {
            return Err(Error::config("worlds", "must be at least 1"));
        }
        if e.per_world < 2 {
            return Err(Error::config("per_world", "must be at least 2"));
        }
        if !(e.held_out_fraction > 0.0 && e.held_out_fraction < 1.0) {
            return Err(Error::config("held_out_fraction", "must lie in (0, 1)"));
        }
        let a = &self.agent;
        if a.d == 0 {
            return Err(Error::config("d", "must be at least 1"));
        }
        self.agent.train_options(self.seed).validate()?;
        if self.build.max_instances == 0 {
            return Err(Error::config("max_instances", "must be at least 1"));
        }
        let ab = &self.ablation;
        if ab.instances == 0 {
            return Err(Error::config("instances", "must be at least 1"));
        }
        for &s in &ab.steps_rendered {
            self.ablated(|c| c.steps_rendered = s).validate()?;
        }
        for &eps in &ab.epsilon {
            self.ablated(|c| c.epsilon = eps).validate()?;
        }
        for &it in &ab.iterations {
            self.ablated(|c| c.iterations = it).validate()?;
        }
        if let Some(&k) = ab
            .instructions
            .iter()
            .find(|&&k| k == 0 || k > INSTRUCTIONS_PER_TRAJECTORY)
        {
            return Err(Error::config(
                "instructions",
                format!("{k} is outside 1..={INSTRUCTIONS_PER_TRAJECTORY}"),
            ));
        }
        Ok(())
    }

    /// The attack baseline with one field changed.
    pub fn ablated(&self, f: impl FnOnce(&mut AttackConfig)) -> AttackConfig {
        let mut c = self.attack.clone();
        f(&mut c);
        c
    }

    /// Attack RNG seed: the `[attack]` seed mixed with the run seed.
    pub fn attack_seed(&self) -> u64 {
        self.attack.seed ^ self.seed
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 over everything that determines a stage's artifacts.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let mut parts = vec![
            json(&self.seed),
            json(&self.world),
            json(&self.episodes),
            json(&self.render),
        ];
        if matches!(stage, Stage::Agent | Stage::Attack | Stage::Ablation) {
            parts.push(json(&self.agent));
        }
        if stage != Stage::World && stage != Stage::Agent {
            parts.push(json(&self.attack.mode));
            parts.push(json(&self.build));
        }
        if matches!(stage, Stage::Attack | Stage::Ablation) {
            parts.push(json(&self.attack));
        }
        if stage == Stage::Ablation {
            parts.push(json(&self.ablation));
        }
        let mut h = Sha256::new();
        for p in parts {
            h.update((p.len() as u64).to_le_bytes());
            h.update(p.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config serializes")
}

/// Artifact groups. Attack instances do not depend on the agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    World,
    Agent,
    Instances,
    /// Attacked atlases and evaluation reports.
    Attack,
    Ablation,
}

/// Parses a TOML config, applying `VHL_*` overrides from the process
/// environment.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_config_with_env(text, std::env::vars())
}

/// Parses a TOML config with explicit overrides. `VHL_SEED` sets a
/// top-level key; `VHL_<SECTION>_<KEY>` sets a key inside a section.
/// Override values are read as TOML scalars, falling back to strings.
pub fn parse_config_with_env(
    text: &str,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<RunConfig> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| toml_error(&e))?;
    let mut overrides: Vec<(String, String)> = env
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    overrides.sort();
    for (var, raw) in overrides {
        apply_override(&mut table, &var, &raw)?;
    }
    let merged = toml::to_string(&table).expect("table serializes");
    let config: RunConfig = toml::from_str(&merged).map_err(|e| keyed_error(&e, &merged))?;
    config.validate()?;
    Ok(config)
}

fn toml_error(e: &toml::de::Error) -> Error {
    Error::config("config", e.message().trim().to_string())
}

/// Names the `section.key` whose value the error points at.
fn keyed_error(e: &toml::de::Error, text: &str) -> Error {
    let Some(span) = e.span() else { return toml_error(e) };
    let before = &text[..span.start.min(text.len())];
    let line = before.rsplit('\n').next().unwrap_or("");
    let key = line.split('=').next().unwrap_or("").trim();
    let section = before
        .lines()
        .rev()
        .find_map(|l| l.trim().strip_prefix('[').and_then(|l| l.strip_suffix(']')));
    let key = match (section, key.is_empty()) {
        (_, true) => return toml_error(e),
        (Some(s), false) => format!("{s}.{key}"),
        (None, false) => key.to_string(),
    };
    Error::config(key, e.message().trim().to_string())
}

const SECTIONS: &[&str] = &[
    "world", "episodes", "render", "agent", "attack", "build", "ablation", "run",
];

fn apply_override(table: &mut toml::Table, var: &str, raw: &str) -> Result<()> {
    let name = var[ENV_PREFIX.len()..].to_ascii_lowercase();
    let value = parse_scalar(raw);
    if let Some((section, key)) = SECTIONS
        .iter()
        .find_map(|s| name.strip_prefix(s).and_then(|r| r.strip_prefix('_')).map(|k| (*s, k)))
    {
        let entry = table
            .entry(section)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let toml::Value::Table(t) = entry else {
            return Err(Error::config(section, "must be a table"));
        };
        t.insert(key.to_string(), value);
    } else {
        if name != "seed" {
            return Err(Error::config(var, "unknown override variable"));
        }
        table.insert(name, value);
    }
    Ok(())
}

fn parse_scalar(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
