//! 2D staggered-grid library and simulator for two diffuse-interface models
//! of two-phase flow with phase transition: an instationary
//! quasi-incompressible Navier-Stokes/Cahn-Hilliard system (model "agg") and
//! a quasi-stationary Stokes/Cahn-Hilliard system (model "qstokes"), both
//! advanced by implicit, unconditionally energy-stable time steps.
//!
//! The discrete operators are built so that the per-step energy inequality,
//! mean conservation of the phase field, and the (-1, 1) phase-field bounds
//! hold structurally (up to nonlinear solver residual) rather than up to
//! truncation error; the `diagnostics` module turns those properties into
//! runtime monitors.

// index loops are the natural idiom in the matrix/stencil kernels
#![allow(clippy::needless_range_loop)]

pub mod diagnostics;
pub mod grid;
pub mod linsolve;
pub mod model_agg;
pub mod model_qstokes;
pub mod params;
pub mod potential;
pub mod scalar;
pub mod sim_cli;
pub mod sparse;

pub use scalar::Scalar;

/// Concrete aliases for the common double-precision instantiation.
pub type Grid64 = grid::Grid<f64>;
pub type Field64 = grid::Field<f64>;
pub type FaceField64 = grid::FaceField<f64>;
pub type SparseOperator64 = sparse::SparseOperator<f64>;
pub type ModelParams64 = params::ModelParams<f64>;
pub type PotentialParams64 = potential::PotentialParams<f64>;
pub type StateAgg64 = model_agg::StateAgg<f64>;
pub type StateQs64 = model_qstokes::StateQs<f64>;
pub type DiagRecord64 = diagnostics::DiagRecord<f64>;
