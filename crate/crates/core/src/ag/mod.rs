//! Dense reverse-mode differentiation engine.
//!
//! Every operation the estimator needs is a primitive here: linear algebra,
//! activations, grouped softmax, layer normalization, losses, and the
//! edge-wise message-passing kernels. Primitives record themselves on a
//! [`Tape`]; [`Tape::backward`] sweeps the record once in reverse.

mod edges;
mod tape;
mod tensor;

pub use edges::EdgeIndex;
pub use tape::{softmax_grouped, Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::sigmoid;
