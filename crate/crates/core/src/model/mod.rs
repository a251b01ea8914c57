//! Tiny causal transformer policy with an optional value head.

mod checkpoint;
mod decoder;
mod params;
mod sampling;
mod transformer;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decoder::Decoder;
pub use params::{param_layout, ParamSpec, PolicyParams};
pub use sampling::{nucleus_distribution, sample_token, GREEDY_TEMPERATURE};
pub use transformer::{forward, forward_with, param_leaves, ForwardOutput};

use serde::{Deserialize, Serialize};

use crate::numerics::NumericsError;
use crate::TokenId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub has_value_head: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 64,
            has_value_head: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.vocab_size < 2 {
            return bad("vocab_size must be >= 2");
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len must be >= 2");
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.vocab_size > u32::MAX as usize {
            return bad("vocab_size does not fit a token id");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token {token} is outside the vocabulary of size {vocab}")]
    TokenOutOfVocab { token: TokenId, vocab: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Anything that can be decoded token by token. Implemented by the
/// transformer and by scripted policies in tests.
pub trait Policy {
    fn vocab_size(&self) -> usize;
    fn max_seq_len(&self) -> usize;
    fn start<'s>(&'s self, prompt: &[TokenId]) -> Result<Box<dyn DecodeState + 's>, ModelError>;
}

/// Incremental decoding state: logits for the next token given everything
/// pushed so far.
pub trait DecodeState {
    fn next_logits(&self) -> Vec<f64>;
    fn push(&mut self, token: TokenId) -> Result<(), ModelError>;
    /// Critic estimate at the last pushed position, if the policy has one.
    fn value(&self) -> Option<f64> {
        None
    }
}

pub(crate) fn check_tokens(tokens: &[TokenId], config: &ModelConfig) -> Result<(), ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    if tokens.len() > config.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: tokens.len(),
            max: config.max_seq_len,
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(ModelError::TokenOutOfVocab {
            token: t,
            vocab: config.vocab_size,
        });
    }
    Ok(())
}
