//! Particle filtering for a stochastic (SALT) 2D Euler model.
//!
//! The crate is layered bottom-up:
//!
//! - [`fields`]: nodal grids, fast sine-transform elliptic solvers, `∇⊥`, interpolation
//! - [`dynamics`]: deterministic damped/forced Euler solver (Arakawa + SSP-RK3)
//! - [`stochastic`]: noise basis calibration, Brownian paths, SPDE propagator
//! - [`observations`]: weather stations, observation noise, likelihood
//! - [`filtering`]: generic tempered particle filter with MCMC jittering
//! - [`ensembles`]: deformation-based initial ensembles
//! - [`diagnostics`]: rmse, spread, rank histograms, forecast reliability
//! - [`experiments`]: perfect- and imperfect-model runs
//! - [`io`]: binary field, basis and path files

pub mod diagnostics;
pub mod dynamics;
pub mod ensembles;
pub mod error;
pub mod experiments;
pub mod fields;
pub mod filtering;
pub mod io;
pub mod observations;
pub mod rng;
pub mod stochastic;

pub use error::{Error, Result};
