//! A small recurrent navigation policy, differentiable down to observation
//! pixels, with behavior-cloning training and greedy rollouts.

mod observe;
mod params;
mod policy;
pub mod tape;
mod train;
mod vocab;

pub use observe::{
    candidates, raw_features, raw_grad_to_pixels, Candidate, ObservationSource, PanoramaFeatures,
    RenderedObservations,
};
pub use params::{ParamsHeader, PolicyParams, Slot, TensorShape, DEFAULT_D, DIR_DIM, RAW_DIM};
pub use policy::{
    direction_features, encode_instruction, episode_loss, featurize_observation, forced_history,
    forced_rollout, policy_step, rollout, rollout_from, Action, ActionDistribution, HistoryState,
    Net, ObservationEncoding, RolloutOutcome, StepVars, DEFAULT_MAX_STEPS,
};
pub use train::{mean_loss, train_bc, BcExample, TrainOptions, TrainReport, World};
pub use vocab::{Vocabulary, PAD_ID, UNK_ID};
