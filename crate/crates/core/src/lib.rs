//! Soft-Bellman equilibria of affine Markov games.
//!
//! * [`game_model`]: per-player MDPs, affine reward parameters, and the
//!   stacked matrices `H`, `K`.
//! * [`forward`]: equilibrium computation by nonlinear least squares, plus
//!   single-player soft value iteration and occupancy utilities.
//! * [`inverse`]: implicit-differentiation gradients and the projected
//!   gradient method for inferring `(b, C)` from observed frequencies.
//! * [`trajectories`]: trajectory preprocessing and empirical estimates.
//! * [`gridworld`]: predator-prey environment and trajectory sampling.
//! * [`io`]: JSON and CSV file formats.
//! * [`report`]: evaluation metrics and the multi-seed experiment driver.

pub mod error;
pub mod forward;
pub mod game_model;
pub mod gridworld;
pub mod inverse;
pub mod io;
pub mod linalg;
pub mod report;
pub mod trajectories;

pub use error::{Error, Result};
pub use forward::{solve_forward, EquilibriumSolution, ForwardConfig};
pub use game_model::{
    build_stacked, validate_game, AffineGame, AffineRewardParams, Layout, PlayerMdp, StackedGame,
};
