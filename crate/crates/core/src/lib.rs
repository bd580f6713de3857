//! Finite-horizon linear-quadratic regulator for nonautonomous parabolic
//! problems with boundary control, on finite-dimensional state spaces.
//!
//! The crate builds the evolution operator of `y' = A(t) y`, the input maps
//! of a boundary-controlled system, solves the Riccati equation in both its
//! differential and integral forms, synthesizes the closed-loop feedback pair
//! and checks the operator identities that tie these objects together.

// Negated comparisons are deliberate: they reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod closed_loop;
pub mod config;
pub mod control_maps;
pub mod error;
pub mod evolution;
pub mod grid;
pub mod linalg;
pub mod path;
pub mod problem;
pub mod quadrature;
pub mod riccati;
pub mod verify;

pub use error::{Error, Result};
pub use evolution::{evolution_operator, frac_power, EvolutionTable};
pub use grid::TimeGrid;
pub use linalg::{Mat, Vector};
pub use path::{ControlPath, NodePath, OperatorPath, StatePath};
pub use problem::{build_heat_problem, validate_hypotheses, HeatConfig, ProblemSpec};
