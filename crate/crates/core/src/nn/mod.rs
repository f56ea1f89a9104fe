//! Minimal dense tensor algebra with reverse-mode differentiation.

pub mod graph;
pub mod layers;
pub mod mat;
pub mod store;

pub use graph::{sigmoid, softmax_rows, Graph, ParamGrads, Var};
pub use mat::Mat;
pub use store::{Adam, AdamConfig, ParamId, ParamStore};
