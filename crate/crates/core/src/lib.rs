//! Hypermodel-based randomized value functions for exploration in
//! reinforcement learning: a closed-form tabular agent, a small neural agent
//! with a last-layer linear hypermodel, desk-scale environments and the
//! baselines they are compared against.

pub mod agent;
pub mod baselines;
pub mod envs;
pub mod error;
pub mod hypermodel;
pub mod neural;
pub mod rng;
pub mod tabular;

pub use agent::{run_episode, Agent, EpisodeSummary};
pub use error::{Error, Result};
pub use rng::{DistKind, ReferenceDist, RngStream};
