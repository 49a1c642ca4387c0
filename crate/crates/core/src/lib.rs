//! Damped jump-telegraph processes.
//!
//! A particle alternates between two velocity regimes at the switching
//! times of a two-state renewal chain and jumps at every switch. Velocities
//! and jump amplitudes depend on the duration of the previous sojourn.
//!
//! - [`model`]: states, regimes, sojourn laws, specifications and paths.
//! - [`distributions`]: the catalog of sojourn families and their ratios.
//! - [`simulate`]: exact path sampling, Monte Carlo estimators and
//!   likelihood-ratio weights.
//! - [`analytic`]: closed-form transition densities in the constant case.
//! - [`volterra`]: Volterra solvers for moments and expectations.
//! - [`martingale`]: balance identity, ratio-driven densities and
//!   measure-change plans.

pub mod analytic;
pub mod distributions;
pub mod error;
pub mod martingale;
pub mod model;
pub mod quadrature;
pub mod simulate;
pub mod volterra;

pub use error::{Error, Result};
pub use model::{JumpRegime, Path, ProcessSpec, SojournDistribution, State, VelocityRegime};
