//! Minimal dense-array engine with tape-based reverse-mode differentiation.
//!
//! Everything downstream (state-space scans, encoder blocks, losses, the
//! attention baseline) is expressed in these primitives. Arrays are
//! row-major `f32` or `f64`; a [`Tape`] records primitive applications on
//! one thread and replays them in reverse to accumulate leaf gradients.

mod array;
mod gradcheck;
pub mod memory;
pub mod ops;
mod scalar;
mod tape;

pub use array::Array;
pub use gradcheck::{finite_difference_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use ops::Activation;
pub use scalar::{gemm, Scalar};
pub use tape::{grad, BackwardCtx, BackwardOp, Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("gradient requested from non-scalar output of shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("out of memory: {live} live bytes exceeds budget of {budget}")]
    OutOfMemory { live: usize, budget: usize },
    #[error(
        "gradient check failed for parameter {param} at index {index}: analytic {analytic:e} vs numeric {numeric:e} (rel err {rel_err:e} > {tol:e})"
    )]
    GradCheck {
        param: usize,
        index: usize,
        analytic: f64,
        numeric: f64,
        rel_err: f64,
        tol: f64,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
}
