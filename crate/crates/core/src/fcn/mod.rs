//! Fully convolutional network engine with hand-written forward and
//! backward passes.

pub mod batchnorm;
pub mod checkpoint;
pub mod conv;
pub mod model;
pub mod network;
pub mod real;
pub mod tensor;

pub use batchnorm::{BnConfig, Mode};
pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use model::{build_model, Activation, FcnModel, LayerSpec, ModelConfig, Variant};
pub use network::{
    backprop, backward, forward, input_batch, logit_backward, ForwardCache, Gradients, ReluGate,
};
pub use real::Real;
pub use tensor::Tensor;
