//! Texture attacks: instance selection and projected-gradient optimization
//! of one object's appearance.

mod config;
mod instance;
mod optimize;

pub use config::{AttackConfig, AttackMode};
pub use instance::{
    build_attack_instance, candidate_objects, filter_candidates, guide_of, max_coverages,
    split_hash, split_support, AttackInstance, CandidateMap, Rejection, COVERAGE_THRESHOLD,
    FAR_GOAL_DISTANCE, MIN_SUPPORT,
};
pub use optimize::{
    adam_project_step, attack_loss, best_checkpoint, hijack_rollout, optimize_attack, project,
    validation_score, AttackProblem, AttackRun, AttackSetup, AttackedObservations,
    CheckpointRecord, ObjectViews, TextureOptimizer,
};
