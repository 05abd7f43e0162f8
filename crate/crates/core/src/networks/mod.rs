//! Source and target networks, trained with hand-written backpropagation.
//!
//! The source model is an encoder plus a single linear head. The target
//! model adds a batch-norm + linear bottleneck and a weight-normalised
//! classifier. Encoder parameters form the backbone group, everything after
//! it the new-layer group, each with its own learning rate.

mod checkpoint;
mod layers;
mod models;
mod optim;
mod params;
mod source;

pub use checkpoint::{Architecture, Checkpoint};
pub use layers::Mode;
pub use models::{
    EncoderSpec, Network, SourceArch, SourceModel, SourceTrace, TargetArch, TargetModel,
    TargetTrace,
};
pub use optim::{LrPair, OptimConfig, Sgd};
pub use params::{Grads, Param, ParamGroup, ParamStore};
pub use source::{accuracy, source_objective, train_source, SourceTrainConfig, SourceTraining};
