//! The acoustic backbone: feed-forward transformer encoder, variance adaptor
//! with length regulator, feed-forward transformer decoder and mel projection.

mod backbone;
mod checkpoint;
mod config;
pub mod layers;

pub use backbone::{
    embedding_bound, Backbone, ForwardOutput, ItemInput, Mode, SpeakerRef, VarianceTargets,
    PREDICTORS,
};
pub use checkpoint::{Checkpoint, Dtype, Stage, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
