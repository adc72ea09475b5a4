//! Hierarchical Transformer, masked-LM pretraining and the optimizer.

mod checkpoint;
mod config;
mod gradcheck;
mod model;
mod optim;
mod params;
pub mod tape;
mod train;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, CheckpointError};
pub use gradcheck::{check_gradients, TensorCheck, NORM_FLOOR};
pub use config::{ConfigError, ModelConfig, ValueCombiner};
pub use model::{Encoded, MlmOutputs, Model, PretrainGraph, ARCH_COUNT, BYTE_CLASSES};
pub use optim::{AdamConfig, AdamW, Schedule, WARMUP_INIT_LR};
pub use params::ParamSet;
pub use tape::{Gradients, Tape, Var};
pub use train::{
    mask_seed, perplexity, predict_masked, pretrain, pretrain_loss, EpochStats, MaskPrediction, Perplexity,
    TrainConfig, TrainError, Trainer,
};

#[cfg(test)]
mod tests;
