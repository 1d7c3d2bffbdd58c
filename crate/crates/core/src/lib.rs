//! Numerical homogenization of periodic non-divergence elliptic operators
//! with a large centered drift.
//!
//! The pipeline runs invariant measure → weighted drift and flux tensor →
//! drift-free divergence-form matrix `q` → cell problems → effective tensor,
//! and checks the result against boundary value problems and Monte Carlo.

// NaN has to fail every `!(x <= tol)` style check
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod expr;
pub mod torus;
pub mod linalg;
pub mod measure;
pub mod quadrature;
pub mod transform;
pub mod cell;
pub mod bvp;
pub mod sde;
pub mod fieldio;
pub mod config;
