//! Dense tensors, reverse-mode differentiation and the Adam optimiser.

mod adam;
pub mod gradcheck;
mod params;
mod sparse;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use params::{xavier_uniform, Bound, ParamId, ParamStore};
pub use tape::{dropout_mask, Gradients, Tape, Var, LAYER_NORM_EPS};
pub use sparse::CsrMatrix;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
