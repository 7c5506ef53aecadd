//! CNN layers, forward evaluation, loss and backpropagation.

pub mod layer;
pub mod loss;
mod model;

pub use layer::{LayerParams, LayerSpec};
pub use loss::{cce_grad, cce_loss, cce_loss_batch, one_hot};
pub use model::{reference_image, reference_mnist, ActivationRecord, Gradients, Model};
