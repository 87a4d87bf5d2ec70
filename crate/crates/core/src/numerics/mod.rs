//! Dense tensors, a reverse-mode tape, layers and the optimizer used for training.

pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Grads, Graph, Var};
pub use kernels::AttnDims;
pub use optim::{clip_grad_norm, cosine_lr, Adam, AdamConfig};
pub use params::{Bound, ParamId, ParamSet};
pub use tensor::{Scalar, Tensor};
