//! Discrete Fourier–Laplace calculus for evolutionary equations
//! `(∂t M(∂t) + A) u = f`, and a laboratory for G-convergence of material laws
//! under oscillatory coefficients.
// `!(x > 0.0)` guards deliberately reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod error;
pub mod evo_solver;
pub mod cli;
pub mod homogenize;
pub mod material_law;
mod linalg;
pub mod space_ops;
pub mod time_axis;
pub use error::{Error, Result};
