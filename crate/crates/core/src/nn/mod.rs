//! Small deterministic CNN engine: tensors, layers, backprop and SGD.

mod layer;
mod network;
mod optim;
mod tensor;

pub use layer::{softmax_inplace, xavier_init, LayerKind, LayerSpec};
pub use network::{cross_entropy, Gradients, LayerParams, Network, Trace};
pub use optim::{sgd_step, OptimizerState};
pub use tensor::{argmax, one_hot, Scalar, Tensor};
