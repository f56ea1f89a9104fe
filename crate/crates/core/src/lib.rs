pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod expert;
pub mod linalg;
pub mod motion;
pub mod nn;
pub mod plot;
pub mod rng;
pub mod semantic;
pub mod style;
pub mod workspace;

pub use error::{Error, Result};
