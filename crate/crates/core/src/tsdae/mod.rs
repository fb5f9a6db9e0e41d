//! Denoising auto-encoder pre-training with a decoder that attends only to
//! the sentence embedding.

mod model;
mod noise;
mod train;

use thiserror::Error;

use crate::encoder::EncoderError;
use crate::tensor::TensorError;

pub use model::{restricted_cross_attention, CrossAttnVars, TsdaeExample, TsdaeModel};
pub use noise::{apply_deletion_noise, delete_tokens, deletion_count, NoiseSpec};
pub use train::{train_tsdae, PretrainConfig, TsdaeRun};

#[derive(Debug, Error)]
pub enum TsdaeError {
    #[error("corpus has no usable sentences")]
    EmptyCorpus,
    #[error("invalid pre-training config: {0}")]
    Config(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
