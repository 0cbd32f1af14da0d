//! Multilevel Monte Carlo for random homogenization.
//!
//! - [`field`]: random coefficient fields (analytic 1D families, KL-sampled
//!   Gaussian and log-normal fields, macroscopic factors).
//! - [`cell`]: RVE corrector problems and apparent homogenized tensors.
//! - [`mlmc`]: level plans, coupled estimators, cost models, error statistics.
//! - [`coarse`]: coarse-scale homogenized solutions and weighted MLMC.
//! - [`rates`]: convergence-rate regression.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cell;
pub mod coarse;
pub mod error;
pub mod field;
pub mod grid;
pub mod linalg;
pub mod mlmc;
pub mod rates;

mod fv;

pub use error::{Error, Result};
pub use grid::UniformGrid;
