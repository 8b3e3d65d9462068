//! Video-conditioned masked generative transformer over motion tokens.
//!
//! The base transformer predicts first-layer tokens from a corrupted
//! sequence, conditioned two ways: an intention vector distilled from the
//! frame features is prepended to the token stream for self-attention, and
//! every block cross-attends from the token stream to the projected frames.
//! A residual transformer of the same shape then fills the remaining
//! quantizer layers one at a time.

pub mod decoding;
pub mod intention;
pub mod masking;
pub mod training;
pub mod transformer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use decoding::{generate_base, generate_base_traced, generate_reaction, residual_predict, DecodeTrace};
pub use intention::{IntentionEmbedding, IntentionExtractor};
pub use masking::{corrupt, cosine_mask_ratio, masked_loss, unmasked_after_step, CorruptedTokens};
pub use transformer::{AttentionTrace, Conditioning, MaskedTransformer, ResidualTransformer};

/// Trainable-architecture and schedule settings shared by both transformers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub latent_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f32,
    /// Hidden width of the intention FFN.
    pub intention_hidden: usize,
    /// false: use the pooled global feature directly as the intention.
    pub use_iie: bool,
    /// false: drop the motion-frame cross-attention.
    pub use_die: bool,
    pub max_tokens: usize,
    pub batch_size: usize,
    pub base_epochs: usize,
    pub residual_epochs: usize,
    pub learning_rate: f64,
    pub warmup_iters: usize,
    pub weight_decay: f64,
}

impl TransformerConfig {
    pub fn full() -> Self {
        TransformerConfig {
            latent_dim: 384,
            layers: 6,
            heads: 6,
            ffn_dim: 1024,
            dropout: 0.1,
            intention_hidden: 1024,
            use_iie: true,
            use_die: true,
            max_tokens: 50,
            batch_size: 64,
            base_epochs: 200,
            residual_epochs: 200,
            learning_rate: 2e-4,
            warmup_iters: 250,
            weight_decay: 0.01,
        }
    }

    pub fn toy() -> Self {
        TransformerConfig {
            latent_dim: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            dropout: 0.0,
            intention_hidden: 32,
            batch_size: 16,
            base_epochs: 300,
            residual_epochs: 150,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            ..Self::full()
        }
    }
}

/// Fully resolved architecture of one transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f32,
    pub intention_hidden: usize,
    pub use_iie: bool,
    pub use_die: bool,
    pub max_tokens: usize,
    /// Real codebook entries K; ids `K` and `K + 1` are MASK and PAD.
    pub vocab: usize,
    /// Frame feature width d_vl.
    pub vision_dim: usize,
    /// Quantizer layers beyond the base (residual transformer only).
    pub residual_layers: usize,
    /// Codebook entry width (residual transformer only).
    pub code_dim: usize,
}

impl ModelConfig {
    pub fn resolve(t: &TransformerConfig, vocab: usize, vision_dim: usize, residual_layers: usize, code_dim: usize) -> Self {
        ModelConfig {
            latent_dim: t.latent_dim,
            layers: t.layers,
            heads: t.heads,
            ffn_dim: t.ffn_dim,
            dropout: t.dropout,
            intention_hidden: t.intention_hidden,
            use_iie: t.use_iie,
            use_die: t.use_die,
            max_tokens: t.max_tokens,
            vocab,
            vision_dim,
            residual_layers,
            code_dim,
        }
    }

    pub fn mask_id(&self) -> u32 {
        self.vocab as u32
    }

    pub fn pad_id(&self) -> u32 {
        self.vocab as u32 + 1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("transformer: {m}")));
        if self.heads == 0 || self.latent_dim % self.heads != 0 {
            return fail(format!(
                "latent_dim {} must be divisible by heads {}",
                self.latent_dim, self.heads
            ));
        }
        if self.layers == 0 || self.vocab < 2 || self.vision_dim == 0 || self.max_tokens == 0 {
            return fail("layers, vocab, vision_dim and max_tokens must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Decoding controls for one generation call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    /// Parallel decoding iterations S.
    pub iterations: usize,
    pub temperature: f32,
    /// Number of tokens n; the decoded motion has 4 n frames.
    pub target_length: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            iterations: 10,
            temperature: 1.0,
            target_length: 49,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self, max_tokens: usize) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::invalid("decoding needs at least one iteration"));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::invalid("temperature must be non-negative"));
        }
        if self.target_length == 0 || self.target_length > max_tokens {
            return Err(Error::invalid(format!(
                "target length {} outside [1, {max_tokens}]",
                self.target_length
            )));
        }
        Ok(())
    }
}
