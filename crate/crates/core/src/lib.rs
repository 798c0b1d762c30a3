//! Texture-space adversarial attacks against instruction-following
//! navigation agents.
//!
//! The crate generates synthetic worlds ([`worldgen`]), renders panoramic
//! observations with an exact texture-space backward pass ([`render`]),
//! trains a small navigation policy ([`agent`]), optimizes object-texture
//! attacks ([`attack`]) and measures their effect ([`eval`]). The
//! [`pipeline`] module ties the stages together behind a config file.

pub mod error;
pub mod eval;
pub mod agent;
pub mod attack;
pub mod math;
pub mod optim;
pub mod pipeline;
pub mod render;
pub mod worldgen;

pub use error::{Error, Result};
