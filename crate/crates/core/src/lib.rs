//! Graph-based visual-semantic entanglement (GVSE) for zero-shot image
//! recognition, built from scratch on a small f64 autodiff tape.

pub mod data;
pub mod embed;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Activation, ParamId, ParamStore, Tape, Tensor, Var};
