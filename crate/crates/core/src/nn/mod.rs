//! Minimal neural-network substrate: tensors, a differentiable tape, layers,
//! Adam and checkpoint serialisation.

pub mod checkpoint;
pub mod embed;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use embed::StepEmbedding;
pub use graph::{Grads, Graph, NodeId};
pub use optim::{decayed_lr, Adam, AdamConfig};
pub use params::{Init, Param, ParamStore};
pub use tensor::{matmul, Scalar, Tensor};
