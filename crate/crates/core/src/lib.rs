//! A desk-scale on-policy reinforcement learning laboratory.
//!
//! Vanilla policy gradient with `K` value-regression steps per iteration,
//! PPO, and the instruments used to compare them: value-estimation error,
//! probability-ratio statistics, Lyapunov exponents and Hölder-exponent
//! probes of the objective landscape.

pub mod algorithms;
pub mod diagnostics;
pub mod envs;
pub mod error;
pub mod harness;
pub mod nn;
pub mod policy;
pub mod rollout;

pub use error::{Error, Result};
