//! Minimal deterministic neural-network kernel.

pub mod adam;
pub mod layers;
pub mod params;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use layers::{
    conv2d_backward, conv2d_backward_opt, conv2d_forward, conv_output_size, dense_backward,
    dense_forward, dropout, dropout_backward, global_avg_pool, global_avg_pool_backward, relu,
    relu_backward, relu_in_place, softmax, softmax_xent, ConvGrads, DenseGrads,
};
pub use params::{ParamVector, Segment};
pub use tensor::Tensor;
