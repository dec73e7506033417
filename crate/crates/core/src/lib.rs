pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod patch;
pub mod report;
pub mod structure;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
