//! Relaxations of constrained optimal control problems.
//!
//! The crate solves the occupation-measure relaxation of a fixed-horizon
//! optimal control problem as a grid linear program, computes upper bounds on
//! the classical value by direct multistart search, turns Young-measure
//! (relaxed) controls into classical ones by chattering, probes the
//! sufficient conditions under which no relaxation gap can occur, and bounds
//! the gap through inner approximations of the state constraint.

pub mod exprlang;
pub mod problem;
pub mod dynamics;
pub mod lp;
pub mod occmeas;
pub mod corpus;
pub mod classical;
pub mod chattering;
pub mod conditions;
pub mod gap;
