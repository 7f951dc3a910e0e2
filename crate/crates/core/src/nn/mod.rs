//! Minimal tensors, layers and optimizer for the convolutional classifier.

pub mod adam;
pub mod checkpoint;
pub mod loss;
pub mod model;
pub mod tensor;

pub use adam::AdamState;
pub use loss::bce_loss;
pub use model::{Cache, Grads, Layer, Model, ModelConfig};
pub use tensor::{activation, dropout, maxpool2d, xcorr2d, Activation, Scalar, Tensor};
