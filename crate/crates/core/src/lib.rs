//! Bayesian history-based subgrid closures for the two-scale Lorenz '96
//! system.
//!
//! The crate covers the whole pipeline:
//!
//! * [`truth`]: the 264-dimensional truth model, its sparse noisy
//!   observations and a largest-Lyapunov-exponent estimator;
//! * [`mlp`]: the closure network with exact reverse-mode gradients;
//! * [`closure`]: instantaneous (ODE) and history-based (DDE) parameterized
//!   systems with differentiable RK4 stepping;
//! * [`train`]: deterministic Adam training on multi-step rollout losses;
//! * [`hmc`]: Hamiltonian Monte Carlo over network weights and precision
//!   hyperparameters;
//! * [`forecast`]: deterministic and ensemble forecasts with RMSE,
//!   calibration and relative-spread metrics;
//! * [`experiment`]: seeded JSON experiment configs, file formats and the
//!   commands driven by the `histclosure` binary.
//!
//! Runnable walkthroughs of each capability live in the crate's
//! `examples/` directory.

pub mod closure;
pub mod error;
pub mod experiment;
pub mod forecast;
pub mod hmc;
pub mod io;
pub mod mlp;
pub mod train;
pub mod truth;

pub use error::{Error, Result};
