//! Minimal tape-based differentiation and the layers the pipeline needs.

pub mod graph;
pub mod network;
pub mod optim;

pub use graph::{Gradients, Graph, Var};
pub use network::{Bound, Mode, Network};
pub use optim::AdamW;
