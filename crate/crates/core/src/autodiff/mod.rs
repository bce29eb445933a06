//! Reverse-mode automatic differentiation.
//!
//! [`tape`] records scalar programs node by node and is the general-purpose
//! route (potential gradients, gradient checks). [`graph`] records programs
//! over batch-major matrices and carries network training.

pub mod graph;
pub mod tape;

pub use graph::{Grads, Graph, NodeId};
pub use tape::{record, value_and_grad, Recording, Tape, Unary, Var};
