//! Supervised fine-tuning on NLI triplets and STS evaluation.

mod data;
mod loss;
mod train;

use thiserror::Error;

use crate::encoder::EncoderError;
use crate::tasks::TaskError;
use crate::tensor::TensorError;

pub use data::{
    build_triplets, load_nli, load_sts, parse_nli, parse_sts, NliExample, NliLabel, StsPair, Triplet, TripletBatch,
};
pub use loss::{average_ranks, classification_logits, mnr_loss, mnr_loss_var, spearman};
pub use train::{finetune_nli, sts_spearman, triplet_loss, FinetuneConfig, FinetuneRun};

#[derive(Debug, Error)]
pub enum NliError {
    #[error("cannot read {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("malformed table: {0}")]
    Format(String),
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("line {line}: {reason}")]
    Row { line: u64, reason: String },
    #[error("no triplets to train on")]
    NoTriplets,
    #[error("invalid fine-tuning config: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("correlation undefined: {0}")]
    Undefined(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Task(#[from] TaskError),
}
