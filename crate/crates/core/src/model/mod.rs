//! CONV-FC model family: architecture, weights, tracing, training and persistence.

mod forward;
mod io;
mod spec;
mod train;
mod weights;

pub use forward::{backward, forward, forward_from, output_gradient, ForwardTrace, Gradients};
pub use io::{load_model, model_from_bytes, model_hash, model_to_bytes, save_model, MAGIC, VERSION};
pub use spec::{Layer, ModelSpec};
pub use train::{evaluate_accuracy, mean_loss, predict, train_sgd, TrainConfig, TrainLog};
pub use weights::{build_model, ModelWeights};
