//! Desk-scale differentiable classifiers and the imbalance training recipes:
//! cross-entropy or focal loss, L2 regularization, optional class-balanced
//! batching, and early stopping on validation loss.
//!
//! Optimization is plain mini-batch gradient descent with a constant step and
//! runs single-threaded, so a fixed set of seeds reproduces parameters bit for
//! bit.

pub mod batches;
pub mod checkpoint;
pub mod loss;
pub mod model;
pub mod train;

pub use batches::{balanced_batches, shuffled_batches};
pub use loss::{cross_entropy, focal_loss, sigmoid, Loss};
pub use model::{Architecture, Classifier, EpochLog, ModelConfig, Network};
pub use train::{finetune, mean_loss, objective, objective_gradient, train, TrainConfig};
