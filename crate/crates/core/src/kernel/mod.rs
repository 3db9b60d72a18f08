//! Small reverse-mode autodiff kernel over 2-D f64 tensors, with Adam and a
//! checkpoint container.

pub mod adam;
pub mod checkpoint;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use checkpoint::Container;
pub use params::{bind_params, ParamTensor};
pub use tape::{matmul_plain, AttentionMask, Gradients, Tape, Var};
pub use tensor::Tensor;
