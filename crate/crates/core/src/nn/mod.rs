//! Small neural-network toolkit: autodiff tape, parameters, optimizer.

mod params;
mod tape;

pub use params::{glorot, Adam, AdamConfig, Params};
pub use tape::{inverse_sigmoid, sigmoid, softmax_rows, softmax_rows_backward, ConvGeom, Tape, Var};
