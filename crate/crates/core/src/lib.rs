//! Desk-scale workbench for safe online adaptation at an urban crosswalk.
//!
//! A vehicle approaches a signalized crosswalk while a pedestrian of unknown
//! behavior (the latent *mode*) may cross. The crate provides:
//!
//! - [`env`]: the kinematic simulator and its sensor model,
//! - [`policy`]: the softmax policy network and offline meta-training,
//! - [`belief`]: Bayesian filtering of the latent mode,
//! - [`cola`]: lookahead adaptation of the policy under a KL trust region,
//! - [`ssc`]: symbolic safety constraints, shielding and constraint synthesis,
//! - [`harness`]: closed-loop experiments and metrics for RL / COLA / NUMERLA.

pub mod belief;
pub mod cola;
pub mod env;
pub mod error;
pub mod harness;
pub mod io;
pub mod policy;
pub mod rng;
pub mod ssc;

pub use error::{Error, Result};
