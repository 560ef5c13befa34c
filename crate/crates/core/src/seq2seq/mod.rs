//! Encoder-decoder transformer with an optional soft prompt prefixed to the
//! encoder input.

mod checkpoint;
mod config;
mod model;
mod params;
mod vocab;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{ModelConfig, SizeTag};
pub use model::{
    bind, decode, decoder_inputs, encode, teacher_forced_logits, Encoded, StepDistributions,
};
pub use params::{Attn, DecoderLayer, EncoderLayer, Ffn, ModelParams, Norm, PromptMatrix, Weights};
pub use vocab::{
    normalize_text, split_tokens, Tokenized, Vocabulary, BOS, EOS, PAD, RESERVED, UNK,
};

use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("sequence length: {0}")]
    Length(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("i/o: {0}")]
    Io(String),
    #[error("parse: {0}")]
    Parse(String),
    #[error("corrupt checkpoint: {0}")]
    Corruption(String),
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
}
