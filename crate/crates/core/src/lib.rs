//! Hierarchical phasor memory network engine.

pub mod autodiff;
pub mod checkpoint;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod phasor;
pub mod rng;
pub mod scan;
pub mod task;
pub mod tensor;
pub mod train;

pub use autodiff::{Elementwise, Gradients, Tape, Var};
pub use tensor::{Float, Tensor, TensorError};
