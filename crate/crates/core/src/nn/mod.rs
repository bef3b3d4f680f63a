//! A small CPU neural-network stack in `f64`: tensors, layers with
//! hand-written backward passes, cross-entropy and focal losses, Adam, the
//! three sub-model architectures and a binary checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
mod layers;
mod loss;
mod model;
mod optim;
mod tensor;

pub use layers::{
    AvgPool2d, Concat, Conv2d, Dense, GlobalAvgPool, Identity, Layer, MaxPool2d, Param, ParamVisitor, Relu,
    Residual, Sequential,
};
pub use loss::{class_weights, cross_entropy, focal_loss, ClassWeights, LossKind, LossSpec, LOG_EPS};
pub use model::{
    Architecture, ForwardPass, FusionHead, HasParams, SubModel, SubModelSpec, INPUT_CHANNELS, TRUNK_CHANNELS,
};
pub use optim::{Adam, AdamConfig};
pub use tensor::{argmax, softmax, Tensor};
