//! End-to-end stages: data preparation, training and evaluation.

mod diagnostics;
mod evaluate;
mod prepare;
mod train;

pub use diagnostics::*;
pub use evaluate::*;
pub use prepare::*;
pub use train::*;
