//! Simulation and verification toolkit for dynamic Markov bridges.
//!
//! A dynamic bridge is a diffusion `X` driven by its own Brownian motion and
//! steered so that it ends at the terminal value of an independent signal `Z`,
//! while staying a martingale in its own filtration. The crate builds the
//! coefficient models, the transition kernels that define the bridge drift,
//! Monte Carlo samplers, filters, PDE residual checks, and the insider-trading
//! equilibrium that uses the bridge as its optimal demand.

pub mod error;
pub mod quad;
pub mod rng;

pub mod model;
pub mod transform;
pub mod kernels;
pub mod pdesolve;
pub mod simulate;
pub mod filter;
pub mod equilibrium;
pub mod stats;
pub mod cli;

pub use error::{Error, Result};
