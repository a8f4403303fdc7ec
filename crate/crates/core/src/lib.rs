//! Prompt-tuned decision transformer at desk scale.
//!
//! A prompt-conditioned causal transformer is pretrained on offline
//! multi-task trajectories from synthetic point-mass environments, then
//! adapted to held-out tasks by optimizing only its trajectory prompt with a
//! ranking-based zeroth-order optimizer.
//!
//! Module map:
//!
//! * [`envs`]: task families, dynamics, scripted behavior policies, datasets.
//! * [`trajdata`]: episodes, prompt sampling, sequence assembly, prompt
//!   flattening and dataset files.
//! * [`dtmodel`]: the transformer, its loss, inference and checkpoints.
//! * [`pretrain`]: multi-task pretraining and the full fine-tuning baseline.
//! * [`zorank`]: ranking oracles, ranking DAGs, the rank-based gradient
//!   estimator and the prompt tuner.
//! * [`eval`]: rollouts, score normalization and ablation harnesses.

pub mod artifact;
pub mod dtmodel;
pub mod envs;
mod error;
pub mod eval;
pub mod plot;
pub mod pretrain;
pub mod seeds;
pub mod trajdata;
pub mod zorank;

pub use error::{Error, Result};

/// Version stamped into every file this crate writes.
pub const FORMAT_VERSION: u32 = 1;
