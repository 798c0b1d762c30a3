//! Config-driven orchestration: each stage reads its upstream artifacts
//! from the output directory, checks their config hash, and writes its own.

mod config;
mod stages;
mod store;
mod summary;

pub use config::{
    parse_config, parse_config_with_env, AblationConfig, AgentConfig, BuildConfig, EpisodeConfig,
    RunConfig, RunSection, Stage, ENV_PREFIX,
};
pub use stages::{
    ablate, attack, build_attacks, eval, gen_world, load_instances, load_params, load_worlds, run,
    train_agent, AblationDoc, AblationRow, AttackLog, Command, CompetenceDoc, Condition, EvalDoc,
    InstanceEval, InstanceSet, RejectionRecord, Split, WorldDoc,
};
pub use store::{
    atomic_write, read_json, read_texture, texture_from_bytes, texture_to_bytes, write_json,
    write_texture, Layout, Stamped, TEXTURE_MAGIC,
};
pub use summary::{pooled, report, DeltaRow, REPORT_CSV_HEADER};
