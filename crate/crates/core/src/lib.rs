//! Risk-biased trajectory forecasting and planning.
//!
//! A self-contained pipeline around a single idea: instead of estimating a
//! tail-risk statistic of a pedestrian forecast from many samples, train a
//! second latent encoder whose distribution is shifted so that the *plain
//! mean* of a collision cost under the shifted distribution matches the
//! conditional value at risk under the original one. Downstream planners then
//! get risk-sensitive behavior from a handful of samples.
//!
//! Modules:
//! - [`autodiff`]: tensors, reverse-mode tape, MLPs, Adam, checkpoints.
//! - [`risk`]: Monte-Carlo risk measures (mean, CVaR, entropic).
//! - [`ttc`]: smooth time-to-collision costs between trajectories.
//! - [`sim`]: a didactic road-crossing simulator and dataset files.
//! - [`cvae`]: the conditional VAE forecaster.
//! - [`biaser`]: the risk-conditioned latent encoder and its diagnostics.
//! - [`planner`]: cross-entropy-method trajectory optimization.
//! - [`metrics`] / [`experiments`]: evaluation statistics and report suites.
//! - [`config`]: one hierarchical config file for every stage.

pub mod autodiff;
pub mod biaser;
pub mod config;
pub mod cvae;
pub mod error;
pub mod experiments;
pub mod geom;
pub mod metrics;
pub mod planner;
pub mod risk;
pub mod rng;
pub mod sim;
pub mod ttc;

pub use error::{Error, Result};
pub use geom::{Trajectory, Vec2};
