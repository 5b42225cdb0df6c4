//! Reverse-mode differentiation over dense `f64` tensors, covering the
//! operations used by training: dense algebra, grid convolutions, the kernel
//! matrix and the regularized linear solve.

mod check;
mod grid;
mod kernel_op;
mod ops;
mod solve;
mod tape;

pub use check::grad_check;
pub use solve::{solve_backward, SolveCache};
pub use tape::{Backward, Gradients, Tape, Tensor, Var};

pub(crate) use grid::Stencil;
