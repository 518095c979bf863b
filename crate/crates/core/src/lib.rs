//! Safe control with control barrier functions for systems facing several
//! non-convex unsafe sets.
//!
//! Two controllers are provided. The standard CBF-QP safety filter
//! ([`cbf::standard_filter`]) minimally modifies a nominal input; it is safe
//! but can create undesired stable equilibria on the boundary of the safe
//! set. The state-avoidance controller ([`avoidance`]) maps the real world to
//! a ball world through a star-world diffeomorphism ([`diffeo`]) and moves and
//! shrinks the ball obstacles so that they avoid the mapped state, which
//! removes those equilibria except on a measure-zero set of starts.

// `!(x < y)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod avoidance;
pub mod cbf;
pub mod diffeo;
pub mod geometry;
pub mod oracle;
pub mod qp;
pub mod sim;
pub mod verify;

pub type Vector = nalgebra::DVector<f64>;
pub type Matrix = nalgebra::DMatrix<f64>;

pub use avoidance::{AvoidanceGains, LoopState, ObstacleCommand, Plant};
pub use cbf::{BarrierFunction, ClassKappa, ControlAffineSystem, LinearSystem};
pub use diffeo::{Diffeo, DiffeoParams};
pub use geometry::{BallObstacle, BallWorld, StarObstacle, StarShape, StarWorld, Workspace, WorkspaceShape};
pub use sim::{run_scenario, Scenario, TrajectoryLog};
pub use qp::{solve_qp, QpSolution, QpStatus, QuadraticProgram};

