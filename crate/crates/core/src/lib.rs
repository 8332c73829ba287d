//! Goal-conditioned probabilistic model predictive control.
//!
//! The crate is organised bottom-up:
//!
//! - [`nn`]: dense MLP with manual backprop, dropout particles, Adam.
//! - [`ensemble`]: dropout-network ensembles with dataset normalisation and
//!   the two-step variance-penalised training loss.
//! - [`planner`]: ensemble-mean rollouts, smoothed objective, CEM search.
//! - [`policy`]: chunked asynchronous execution with action/state buffers.
//! - [`envs`]: deterministic multi-goal toy plants and goal rewards.
//! - [`trainer`]: warm-up, episodic training, curriculum, evaluation,
//!   checkpoints and run configuration.

pub mod ensemble;
pub mod envs;
pub mod error;
pub mod nn;
pub mod planner;
pub mod policy;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
