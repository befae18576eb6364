//! View-consistent latent dynamics as a self-supervised auxiliary task for a
//! pixel-based DQN agent, together with the evaluation statistics used to
//! compare runs.
//!
//! Modules, bottom-up:
//! - [`autodiff`]: reverse-mode differentiation, gradient checking and Adam.
//! - [`env`]: the deterministic "catcher" gridworld with enumerable state.
//! - [`augment`]: pixel-shift views, decoding, and the block-structure check.
//! - [`networks`]: online/target encoder, dynamics, projector, predictors, Q-head.
//! - [`losses`]: prediction, view-consistency, InfoNCE and the weighted total.
//! - [`dqn`]: replay buffer, epsilon-greedy acting and the TD objective.
//! - [`trainer`]: the training loop, evaluation and ablation sweeps.
//! - [`metrics`]: IQM, stratified bootstrap intervals, performance profiles.
//! - [`cli`]: the `vcd` command-line front end.

pub mod augment;
pub mod autodiff;
pub mod cli;
pub mod dqn;
pub mod env;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod rng;
pub mod trainer;
