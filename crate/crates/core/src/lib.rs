//! Drone-racing reinforcement learning with adaptive environment shaping.
//!
//! A racing policy (PPO) learns to fly collective-thrust/body-rate commands
//! through gate tracks while an environment policy (SAC) reshapes each
//! parallel environment's track, rewarded by how the racer ranks on it.

pub mod assets;
pub mod baselines;
pub mod env_agent;
pub mod error;
pub mod eval;
pub mod nn;
pub mod orchestrator;
pub mod pilot;
pub mod racing;
pub mod rng;
pub mod sim;
pub mod track;
pub mod vec_env;

pub use error::{Error, Result, TrackError};
