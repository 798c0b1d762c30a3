//! Synthetic environments: navigation graph, textured labeled mesh, and
//! instruction/trajectory episodes.

mod episodes;
mod graph;
pub mod instruction;
mod layout;
mod scene;

pub use episodes::{
    eligible_paths, episode_id, generate_episodes, Episode, EpisodeId, INSTRUCTIONS_PER_TRAJECTORY,
    MAX_PATH_EDGES, MIN_PATH_EDGES,
};
pub use graph::{NavGraph, NodeId, Trajectory};
pub use instruction::{instruction_from_trajectory, nearest_object};
pub use layout::{generate_world, WorldParams};
pub use scene::{Category, FaceId, ObjectId, Scene, SceneBuilder, SceneObject, TextureAtlas};
