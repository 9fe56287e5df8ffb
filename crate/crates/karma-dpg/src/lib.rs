//! Karma economy population games: centralized equilibrium computation,
//! model-free Q-learning against a population, fictitious-play equilibrium
//! learning, simulators, and evaluation metrics.
//!
//! The crate is organized around the mean field `(μ, π)` — the population's
//! state distribution and bidding policy:
//!
//! * [`game`] — game primitives: states, bids, win probabilities, rewards,
//!   and the pay-bid-to-society karma transition kernel.
//! * [`sne`] — stationary equilibrium solver with residual diagnostics.
//! * [`dqn`] — a small from-scratch MLP Q-learner: RMSprop, replay buffer,
//!   double-Q targets, masked ε-greedy bids.
//! * [`env`] — single-agent environments: frozen mean field, or a concrete
//!   finite population with exact karma accounting.
//! * [`fp`] — fictitious-play outer loop that learns the equilibrium from
//!   scratch with a fresh Q-learner per iteration.
//! * [`metrics`] — Wasserstein distances between policies/distributions and
//!   paired-episode value-gap evaluation.
//! * [`experiment`] — seed sweeps with CSV output and confidence intervals.
//! * [`artifact`] — on-disk interchange formats (equilibrium JSON, network
//!   weights).

pub mod artifact;
pub mod dqn;
pub mod env;
pub mod error;
pub mod experiment;
pub mod fp;
pub mod game;
pub mod mdp;
pub mod metrics;
pub mod rng;
pub mod sne;

pub use error::{Error, Result};
pub use game::{AgentState, GameConfig, MeanField};
