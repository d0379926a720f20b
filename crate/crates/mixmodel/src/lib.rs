//! Lognormal-mixture local-volatility model: mixture diffusions that track
//! an assigned family of marginal densities, closed-form European pricing,
//! smile calibration, Monte Carlo engines, and verification tooling for the
//! model's correlation and density claims.

pub mod analysis;
pub mod calibration;
pub mod error;
pub mod forward_smile;
pub mod io;
pub mod local_vol;
pub mod market_model;
pub mod math;
pub mod pricing;
pub mod simulation;

pub use error::{ModelError, Result};
