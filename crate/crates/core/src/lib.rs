//! Numerical verification of the stochastic maximum principle for control
//! problems whose terminal time is the first instant a mean constraint
//! `E[Phi(X(t))] >= alpha` is met.

// Index loops mirror the component formulas; negated comparisons also reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint;
pub mod error;
pub mod expr;
pub mod model;
pub mod regression;
pub mod report;
pub mod rng;
pub mod simulate;
pub mod smp;
pub mod stats;
pub mod terminal;
pub mod variation;

pub use error::{Error, Result};
pub use model::{load_problem, ControlDomain, ProblemSpec};
pub use simulate::{simulate_ensemble, ControlProcess, PathEnsemble, TimeGrid};
pub use terminal::{hitting_time, mean_constraint_curve, TerminalCase, TerminalTimeEstimate};
