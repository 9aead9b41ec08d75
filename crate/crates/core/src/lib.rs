//! Porous medium equation with absorption on structured grids: regularized
//! forward solver, time-integral transform, large-amplitude boundary-map
//! asymptotics, linearized coefficient recovery and partial-data tools.
//!
//! Everything numeric is generic over `f32`/`f64` through [`Real`]; the
//! aliases below fix `f64` (and `f32` where single precision is supported).

// `!(a > b)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod dense;
pub mod error;
pub mod forward;
pub mod grid;
pub mod partialdata;
pub mod real;
pub mod recovery;
pub mod special;
pub mod transform;

pub use error::{Error, Result};
pub use real::Real;

/// Double-precision instantiations of the generic core.
pub type Grid2 = grid::Grid<f64>;
pub type Field = grid::ScalarField<f64>;
pub type Trace = grid::BoundaryTrace<f64>;
pub type Trajectory = forward::SpaceTimeField<f64>;
pub type BoundaryData = forward::BoundarySeries<f64>;
pub type Coefficients = forward::CoefficientSet<f64>;
pub type Problem = forward::ProblemParams<f64>;
pub type Times = forward::TimeGrid<f64>;

/// Single-precision instantiations.
pub type Field32 = grid::ScalarField<f32>;
pub type Trajectory32 = forward::SpaceTimeField<f32>;
pub type Coefficients32 = forward::CoefficientSet<f32>;
pub type Problem32 = forward::ProblemParams<f32>;
