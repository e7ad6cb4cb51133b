//! Simulation and control of a two-population interacting particle
//! system: a large noisy crowd whose empirical law feeds back into its
//! own drift, steered by a small set of deterministic controlled
//! leaders. The crate provides the finite particle simulator, the
//! mean-field fixed-point solver it converges to, a 1D density-grid
//! solver for cross-checking laws, exact 1-Wasserstein distances, cost
//! functionals with their closed-form identities, a control optimizer,
//! and reproducible convergence studies.
//!
//! Everything is deterministic given a seed: noise comes from a
//! counter-based generator addressed by (run, stream, sample, particle,
//! step), so results are independent of thread count and scheduling.

pub mod config;
pub mod cost;
pub mod error;
pub mod fields;
pub mod fp;
pub mod mckean;
pub mod measures;
pub mod opt;
pub mod rng;
pub mod sim;
pub mod studies;

pub use config::{problem_from_toml, InitialLaw, LeaderInit, ProblemSpec};
pub use error::{Error, Result};
pub use measures::{wasserstein1, EmpiricalMeasure, MeasureFlow};
