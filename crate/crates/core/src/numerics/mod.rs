//! Dense `f64` tensors, a reverse-mode tape, and a finite-difference oracle.

mod adam;
mod fd;
pub mod io;
mod params;
mod rng;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use fd::{finite_diff, max_relative_error};
pub use params::ParamSet;
pub use rng::{derive_seed, Rng};
pub use tape::{gelu, sigmoid, softplus, Gradients, Tape, Var};
pub use tensor::{softmax_rows, Tensor};
