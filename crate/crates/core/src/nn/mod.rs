//! Binary-weight layers, the network description, and the forward pass.

mod binary_conv;
mod network;
mod spec;

pub use binary_conv::{binary_conv2d_forward, binary_conv2d_forward_counted, OpCount};
pub use network::{
    forward_network, forward_recording, ForwardOutput, Mode, Params, Tape, Weights,
};
pub(crate) use network::{BlockSlots, LayerCache, NORM_EPS};
pub use spec::{
    build_micro_resnet, ActShape, Activation, LayerSpec, NetworkSpec, ParamSlot, SlotKind,
    DEFAULT_EMBEDDING_DIM, DEFAULT_LOGIT_SCALE, PRELU_INIT_SLOPE,
};

/// Dense `W̃ = a·B` for a bank, as used by the reference path.
pub fn expand(bank: &crate::binarize::BinaryFilterBank) -> crate::tensor::Tensor<f32> {
    bank.expand()
}
