//! Learned dynamics: tensors, reverse-mode autodiff, the param2deform model,
//! its losses, training loop and checkpoint format.

mod checkpoint;
mod graph;
mod loss;
mod model;
mod tensor;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use graph::{Gradients, Graph, NodeId, Nonlinearity};
pub use loss::{loss_3d, loss_viz};
pub use model::{BoundParams, DynamicsModel, ModelConfig, TrainMeta};
pub use tensor::Tensor;
pub use train::{evaluate_patches, train, Objective, OptimizerKind, TrainConfig, TrainReport};
