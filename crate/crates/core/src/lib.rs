//! Time-consistent open-loop Stackelberg equilibria for linear-quadratic
//! mean-field games with initial-time-dependent (hyperbolic) discounting.

// Checks are written `!(x >= tol)` on purpose so that NaN fails them; the
// path loops index several parallel buffers by step.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod fbsde;
pub mod follower;
pub mod leader;
pub mod linalg;
pub mod problem;
pub mod simulate;
pub mod twotime;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::Mat;
pub use problem::{GridSpec, ProblemSpec};
