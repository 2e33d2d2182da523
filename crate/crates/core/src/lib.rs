//! Tabular lab for video-based representation pre-training in Block MDPs with
//! exogenous noise: exact models, environments, datasets, ERM over finite
//! decoder classes, exact oracles and downstream RL.

pub mod data;
pub mod decoder;
pub mod envs;
pub mod experiments;
pub mod error;
pub mod mdp;
pub mod oracle;
pub mod replearn;
pub mod rl;
pub mod seed;

pub use error::{Error, Result};
