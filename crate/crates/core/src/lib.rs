//! Curriculum approximate unlearning for session-based recommendation.
//!
//! A compact GRU next-item recommender is trained, then selected
//! interactions are forgotten by multi-objective gradient updates whose task
//! weights come from a min-norm (MGDA) solve and whose batches follow an
//! easy-to-hard curriculum.

pub mod cli;
pub mod curriculum;
pub mod data;
pub mod engine;
pub mod eval;
pub mod model;
pub mod pareto;
pub mod synth;
