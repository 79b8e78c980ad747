//! Minimal training engine: tensors, the two fixed architectures, reverse-mode
//! gradients, Adam with decoupled weight decay and checkpoint I/O.

pub mod checkpoint;
mod model;
mod ops;
mod optim;
mod tensor;

pub use checkpoint::{load_checkpoint, load_checkpoint_as, save_checkpoint};
pub use model::{Model, ModelKind, ModelSpec, ParamInfo, ParamLayout, ParamVector};
pub use ops::{
    accuracy, argmax, forward, input_gradient, input_gradients, loss, loss_and_grads,
    per_sample_losses, predict, predict_batch,
};
pub use optim::{adam_step, AdamConfig, LrSchedule, OptimizerState};
pub use tensor::Tensor;
