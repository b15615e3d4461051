//! Dense MLP/CNN core: forward, backward, cross-entropy and momentum SGD.

mod forward;
mod model;
mod optim;

pub use forward::{finite_diff_grad, forward, layer_activations, loss_and_grad, softmax_cross_entropy, Prox};
pub use model::{build_model, Activation, ArchSpec, GroupRole, LayerKind, LayerParams, ModelParams};
pub use optim::{sgd_step, OptimizerState};
