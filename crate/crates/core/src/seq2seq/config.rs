use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeTag {
    Small,
    Large,
}

/// Transformer dimensions. Prompts live in embedding space, so the prompt
/// dimension is always `d_model`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub size: SizeTag,
}

impl ModelConfig {
    /// Student / baseline backbone.
    pub fn small(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            ffn: 128,
            max_len: 160,
            vocab_size,
            size: SizeTag::Small,
        }
    }

    /// Teacher backbone.
    pub fn large(vocab_size: usize) -> Self {
        Self {
            d_model: 96,
            encoder_layers: 3,
            decoder_layers: 3,
            heads: 4,
            ffn: 192,
            max_len: 160,
            vocab_size,
            size: SizeTag::Large,
        }
    }

    pub fn for_size(size: SizeTag, vocab_size: usize) -> Self {
        match size {
            SizeTag::Small => Self::small(vocab_size),
            SizeTag::Large => Self::large(vocab_size),
        }
    }

    pub fn prompt_dim(&self) -> usize {
        self.d_model
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.vocab_size == 0 || self.max_len == 0 || self.ffn == 0 {
            return bad("vocabulary, max length and ffn width must be positive".into());
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let attn = 4 * d * d;
        let norm = 2 * d;
        let ffn = 2 * d * self.ffn + self.ffn + d;
        self.vocab_size * d
            + self.encoder_layers * (2 * norm + attn + ffn)
            + norm
            + self.decoder_layers * (3 * norm + 2 * attn + ffn)
            + norm
            + d * self.vocab_size
            + self.vocab_size
    }
}
