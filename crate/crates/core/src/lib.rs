//! Segment-level reward modeling and PPO on a synthetic keyphrase task.
//!
//! The pipeline trains a small GRU language model on a synthetic corpus,
//! segments responses where the model's next-token entropy is high, learns a
//! reward per segment from pairwise preferences, normalizes those rewards by
//! segment location, and optimizes a policy with PPO on the dense signal.

pub mod error;
pub mod interp;
pub mod lm;
pub mod normalizer;
pub mod numerics;
pub mod pipeline;
pub mod ppo;
pub mod reward;
pub mod rng;
pub mod segment;
pub mod task;

pub use error::{Error, Result};
