pub mod augment;
pub mod autodiff;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod objective;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
