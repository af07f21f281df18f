//! Base pretraining, side and gate training, corpora and checkpoints.

mod checkpoint;
mod corpus;
mod optim;
mod tokenizer;
mod trainer;

use thiserror::Error;

use crate::model::ModelError;
use crate::numcore::NumError;

pub use checkpoint::{
    is_device_param, Checkpoint, CheckpointError, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use corpus::{
    make_synthetic_corpus_with, make_synthetic_personalized_corpus, paired_documents, position_difference, Corpus,
    Persona, SizeTier, Splits, SyntheticSpec,
};
pub use optim::Adam;
pub use tokenizer::{decode, encode, encode_document, BOS, EOS, PAD, VOCAB_SIZE};
pub use trainer::{
    pretrain_base, select_learning_rate, train_side_and_gate, EpochLog, GridSearch, PretrainConfig, Pretrained,
    SideObjective, SideTraining, TrainConfig, LEARNING_RATE_GRID,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Divergence { epoch: usize, step: u64, loss: f64 },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<NumError> for TrainError {
    fn from(e: NumError) -> Self {
        TrainError::Model(e.into())
    }
}
