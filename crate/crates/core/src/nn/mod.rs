//! Miniature CNN engine: layers, forward/backward passes, categorical
//! cross-entropy, SGD/Adam and a checkpointing training loop.

mod artifact;
pub mod gradcheck;
mod layers;
mod loss;
mod network;
mod optim;
mod train;

pub use artifact::{measure, transfer_retrain, ModelArtifact, RetrainOutcome, ValMetrics, MODEL_FORMAT_VERSION, MODEL_MAGIC};
pub(crate) use artifact::read_header;
pub use layers::LayerSpec;
pub use loss::{categorical_crossentropy, onehot, CLAMP_EPS};
pub use network::{reference_layers, Gradients, Network};
pub use optim::{Adam, Optimizer, OptimizerKind, Sgd};
pub use train::{
    argmax, evaluate, train, train_masked, train_with, ParamMasks, EarlyStopping, EpochRecord, Evaluation, Example, Observation, TrainAbort,
    TrainConfig, TrainOutcome,
};

use crate::digest::Digest;
use crate::tensor::ShapeError;
use crate::wire::Truncated;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("architecture error: {0}")]
    Architecture(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("empty input")]
    EmptyInput,
    #[error("malformed artifact: {0}")]
    Format(String),
    #[error(transparent)]
    Truncated(#[from] Truncated),
    #[error("digest mismatch: stored {expected}, computed {actual}")]
    DigestMismatch { expected: Digest, actual: Digest },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
