//! Age-period-cohort (APC) design matrices, penalized least squares and
//! restricted-likelihood variance estimation for fixed- and random-effect
//! APC models, plus the diagnostics that expose the constraints random-effect
//! specifications impose on the unidentified linear components.
//!
//! Module map:
//!
//! - [`design`]: Lexis grids, sum-to-zero / indicator design matrices, rank
//!   and null-space diagnostics.
//! - [`orthopoly`]: orthonormal polynomial bases and level/linear/nonlinear
//!   reparameterizations.
//! - [`penalized`]: penalized normal equations, influence matrices and the
//!   level/linear transfer construction.
//! - [`reml`]: restricted log-likelihood, profiled surfaces and a multi-start
//!   coordinate maximizer.
//! - [`constraint_lab`]: influence-weight sweeps, squared-variation
//!   decomposition and randomized transfer checks.
//! - [`simulation`]: the two-random-effect shrinkage simulation.
//! - [`effects`]: effect decompositions and cross-specification reports.

pub mod constraint_lab;
pub mod design;
pub mod effects;
mod error;
pub mod exec;
pub mod orthopoly;
pub mod penalized;
pub mod reml;
pub mod simulation;

pub use design::{ApcGrid, Cell, DesignBundle, Factor, Parameterization, ReBlock};
pub use error::{ApcError, Result};
pub use exec::Execution;

/// Relative singular-value cutoff used for numerical rank decisions.
pub const RANK_TOL: f64 = 1e-10;
