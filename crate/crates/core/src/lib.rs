//! Preconditioned stochastic gradient descent with preconditioners learned
//! on matrix Lie groups.
//!
//! The preconditioner is kept in factored form `P = QᵀQ` where `Q` lives on
//! a user-selected matrix Lie group (diagonal, upper triangular, Kronecker
//! product, scaling-and-normalization, scaling-and-whitening) and is adapted
//! online by relative-gradient descent with a normalized step size. Two
//! estimation criteria are provided: a Newton-type one driven by
//! Hessian-vector products and a Fisher-type one driven by damped stochastic
//! gradients. Closed-form diagonal special cases (Adam-family second moment,
//! equilibration) and plain SGD/momentum/Adam baselines are included, along
//! with a small reverse-mode autodiff engine for exact gradients and
//! Hessian-vector products and a benchmark harness with reproducible traces.

// `!(x > 0.0)` style guards are used on purpose: unlike `x <= 0.0` they
// also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod kv;
pub mod lie_groups;
pub mod matrix;
pub mod optimizers;
pub mod problem;
pub mod rng;
pub mod selftest;

pub use error::{Error, Result};
pub use lie_groups::{GroupKind, QFactor, RelativeGradient};
pub use matrix::{Matrix, Vector};
pub use optimizers::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use problem::{Batch, Problem};
pub use rng::SeedStream;
