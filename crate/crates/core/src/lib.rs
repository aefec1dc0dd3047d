//! Generalized stochastic differential utility under coarse and fine
//! information: simulation, backward solvers, analytic and PDE oracles, and
//! neutrality experiments.

pub mod aggregators;
pub mod cli;
pub mod closed_form;
pub mod config;
pub mod engine;
pub mod error;
pub mod neutrality;
pub mod paths;
pub mod pde;
pub mod regression;

pub use error::{Error, Result};
