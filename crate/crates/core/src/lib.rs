//! Small-interval Picard/regression solver for fully coupled forward-backward
//! SDEs with jumps, and a Monte Carlo harness auditing its moment, scaling,
//! comparison, stability and regularity properties.

// `!(x > 0.0)` deliberately rejects NaN; index loops mirror the formulas
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod audit;
pub mod cli;
pub mod expr;
pub mod mark_space;
pub mod model;
pub mod pathsim;
pub mod rng;
pub mod solver;
pub mod stats;
