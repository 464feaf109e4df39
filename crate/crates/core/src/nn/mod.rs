//! Desk-scale 3D encoder-decoder networks with hand-written backpropagation.

mod layers;
mod network;
mod tensor;

pub(crate) use network::forward_with;
pub use network::{
    build_backbone, forward_dis, forward_head, forward_seg, value_and_grad, ArchDescriptor,
    Backbone, ForwardCache, Head, NetworkParams, ParamTensor, OUTPUT_EPS,
};
pub use tensor::Tensor;
