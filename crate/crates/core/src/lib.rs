pub mod checkpoint;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub mod numerics;
pub mod synth;
pub mod theory;

pub use error::{Error, Result};
