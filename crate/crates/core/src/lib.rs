//! Desk-scale semi-supervised meta actor-critic.
//!
//! Trains a task-conditioned actor-critic offline from reward-labeled
//! multi-task datasets, then keeps adapting online from reward-free rollouts
//! by relabeling them with a learned reward decoder conditioned on a latent
//! task variable. Includes latent-shift diagnostics and a small CLI.

pub mod agent;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod envs;
pub mod error;
pub mod gradcheck;
pub mod latent;
pub mod metrics;
pub mod nn;
pub mod replay;
pub mod cli;
pub mod diagnostics;
pub mod rng;
pub mod training;

pub use error::{Result, SmacError};
