//! Fairness-aware meta-learned recommender for cold-start users.

pub mod cli;
pub mod data;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod synth;
pub mod trainer;
