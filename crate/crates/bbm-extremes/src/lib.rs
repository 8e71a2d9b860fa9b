//! Monte Carlo toolkit for one-dimensional binary branching Brownian motion:
//! exact and barrier-pruned event-driven simulation, genealogical cluster
//! analysis, spinal samplers for the limiting cluster law, and the
//! statistics needed to check the growth exponents of extreme level sets.

pub mod engine;
pub mod error;
pub mod genealogy;
pub mod io;
pub mod manifest;
pub mod report;
pub mod rng;
pub mod runner;
pub mod spine;
pub mod stats;

pub use engine::{
    centering, log_plus, simulate, simulate_exact, simulate_pruned, Mode, Population, SimConfig,
};
pub use error::{Error, Result};
