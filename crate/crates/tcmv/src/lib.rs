//! Time-consistent mean-variance portfolio selection on finite event trees.
//!
//! The library computes locally mean-variance efficient (time-consistent),
//! myopic, and pre-commitment strategies on event-tree markets, the
//! Föllmer–Schweizer decomposition of the mean-variance tradeoff process,
//! minimal-martingale-measure diagnostics, discretization-convergence
//! experiments against continuous-time closed forms, and the first-passage
//! Brownian example where the static problem degenerates.

pub mod bm_example;
pub mod cli;
pub mod config;
pub mod convergence;
pub mod decomposition;
pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod io;
pub mod model;
pub mod solvers;
pub mod structure;
pub mod tree;

pub use error::{Result, TcmvError};
