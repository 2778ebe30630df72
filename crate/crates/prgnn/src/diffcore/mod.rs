//! Minimal dense-matrix arithmetic with reverse-mode gradient propagation.
//!
//! Computation graphs are rebuilt per forward pass (define-by-run), which
//! keeps variable-size graphs after pooling trivial to handle. Everything is
//! double precision; gradient checks at 1e-4 tolerance are not feasible in
//! single precision.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use matrix::Matrix2D;
pub use tape::{Gradients, NodeId, Tape, KINK_EPS};
