//! Small dense-matrix toolkit: tensors, a reverse-mode tape, MLPs, Adam and
//! a byte-stable container format.
//!
//! Everything is `f64` and single-threaded, so repeated runs with the same
//! inputs produce bit-identical results.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod mlp;
pub mod tape;
pub mod tensor;

pub use adam::Adam;
pub use checkpoint::Bundle;
pub use error::{NdError, Result};
pub use mlp::{Activation, BoundMlp, Linear, Mlp};
pub use tape::{logsumexp, Gradients, Tape, Var};
pub use tensor::Tensor;
