use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub value: Tensor,
    pub requires_grad: bool,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        ParamTensor {
            name: name.into(),
            value,
            requires_grad: true,
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        self.value.shape()
    }
}

/// Registers every parameter as a tape leaf, in order.
pub fn bind_params(tape: &mut Tape, params: &[ParamTensor]) -> Vec<Var> {
    params
        .iter()
        .map(|p| tape.leaf(p.value.clone(), p.requires_grad))
        .collect()
}
