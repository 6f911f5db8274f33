//! Numerical core: dense `f64` tensors, a reverse-mode autodiff tape,
//! gradient checking against central differences, and the ADAM optimizer.
//!
//! Everything is 64-bit so that finite-difference tolerances around `1e-5`
//! are meaningful.

mod adam;
mod check;
mod error;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use check::{compare_gradients, finite_diff_check, FdReport};
pub use error::{NumError, Result};
pub use tape::{gradients, Tape, Var};
pub use tensor::{log_softmax, softmax, Tensor};
