//! Training, evaluation, checkpoints and the ablation harness.
//!
//! The encoders stay outside: a [`Dataset`] carries their embeddings, and
//! only the alignment, fusion, prototype bank, prompt and decoder groups
//! have parameters.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod model;
pub mod train;

pub use ablation::{run_ablation, AblationRow, AblationScores, AblationTable};
pub use checkpoint::Checkpoint;
pub use config::{Ablation, EngineConfig, FusionMode, ModelConfig, ShuffleMode, TrainConfig};
pub use data::{prepare, Dataset, EmbeddingSource, OnTheFly, Precomputed, PreparedSlice, SliceKey};
pub use model::{Fusion, Inference, Model};
pub use train::{evaluate, train, train_from, EpochRecord, Progress, Quiet, StepRecord, TrainLog, TrainObserver};

/// Exact number of trainable scalars in a checkpoint.
pub fn count_trainable(checkpoint: &Checkpoint) -> usize {
    checkpoint.count_trainable()
}
