//! Minimal CPU tensor library: convolution, pooling, deconvolution, the
//! weighted softmax loss, SGD, and a layer-graph executor with explicit
//! backward passes.

mod loss;
mod network;
mod ops;
mod params;
mod tensor;

pub use loss::{labels_from_indices, softmax, softmax_loss, weighted_softmax_loss, ClassWeights};
pub use network::{grad_check, grad_check_input, relative_error, Forward, LayerKind, LayerSpec, Network, NetworkSpec, Source};
pub use ops::{
    bilinear_kernel, bilinear_taps, conv2d, conv2d_backward, deconv2d, deconv2d_backward, fuse_sum, maxpool2x2, maxpool2x2_backward, relu,
    relu_backward, ConvGrads, DeconvGrads,
};
pub use params::{decode_params, encode_params, read_params, sgd_step, write_params, Param, Params, NNP_MAGIC};
pub use tensor::{Real, Tensor};
