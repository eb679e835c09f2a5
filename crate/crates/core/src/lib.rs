//! Brownian dynamics on periodic domains, with and without a Metropolis
//! correction, plus the estimators needed to measure self-diffusion.
//!
//! The library simulates the overdamped Langevin equation
//! `dq = -beta * grad V(q) dt + sqrt(2) dW` on a periodic box using the
//! Euler-Maruyama discretization, either bare (`em_step`) or Metropolized
//! (`mala_step`). Displacements are accumulated on the unwrapped lift of the
//! trajectory so that self-diffusion can be estimated two ways:
//!
//! * Einstein route: mean-squared displacement growth over an ensemble of
//!   replicas, fitted through the origin.
//! * Green-Kubo route: truncated discrete sum of the force autocorrelation.
//!
//! Both estimators carry an O(dt) discretization bias; sweeping the time step
//! and extrapolating with [`estimators::affine_fit`] recovers the continuous
//! limit. For one-dimensional potentials, [`oracles`] provides two independent
//! semi-analytic references (a homogenized mobility formula and a finite
//! difference Poisson solve) as well as the asymptotic dt^{3/2} rejection-rate
//! prefactor of the Metropolized scheme.
//!
//! Everything downstream of a seed is deterministic: replicas draw from
//! dedicated counter-based RNG streams and reductions run in a fixed order,
//! so results are independent of the worker count.

pub mod config;
pub mod dynamics;
pub mod ensemble;
pub mod estimators;
pub mod model;
pub mod oracles;
pub mod runner;
pub mod sum;

pub use dynamics::{DynamicsParams, RngStream, Scheme, StepOutcome};
pub use ensemble::{EnsembleMode, EnsemblePlan};
pub use model::{Configuration, PotentialModel, SimulationBox};
