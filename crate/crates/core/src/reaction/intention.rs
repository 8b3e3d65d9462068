//! Interaction-intention extraction: the pooled global feature queries the
//! per-frame features, and the attended vector passes through an FFN.

use candle_core::{Module, Tensor};
use candle_nn::Linear;

use crate::error::Result;
use crate::nn::{softmax_last, FeedForward, ParamStore};

pub struct IntentionExtractor {
    w_q: Linear,
    w_k: Linear,
    w_v: Linear,
    ffn: FeedForward,
    dim: usize,
}

/// Intention vectors for a batch, before and after projection to the
/// transformer width.
pub struct IntentionEmbedding {
    /// `(B, 1, d_vl)`.
    pub vector: Tensor,
    /// `(B, 1, d_l)`.
    pub projected: Tensor,
    /// Frame weights `(B, 1, T)` when attention was used.
    pub weights: Option<Tensor>,
}

impl IntentionExtractor {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(IntentionExtractor {
            w_q: ps.linear(&format!("{name}.w_q"), dim, dim, false)?,
            w_k: ps.linear(&format!("{name}.w_k"), dim, dim, false)?,
            w_v: ps.linear(&format!("{name}.w_v"), dim, dim, false)?,
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), dim, hidden, dim)?,
            dim,
        })
    }

    /// Single-query attention over frames. `global` is `(B, 1, d)`,
    /// `frames` is `(B, T, d)`. Returns the attended vector and weights.
    pub fn attend(&self, global: &Tensor, frames: &Tensor) -> candle_core::Result<(Tensor, Tensor)> {
        let q = self.w_q.forward(global)?;
        let k = self.w_k.forward(frames)?;
        let v = self.w_v.forward(frames)?;
        let logits = (q.matmul(&k.t()?.contiguous()?)? / (self.dim as f64).sqrt())?;
        let weights = softmax_last(&logits)?;
        Ok((weights.matmul(&v)?, weights))
    }

    /// Returns the intention vector `(B, 1, d)` and frame weights.
    pub fn forward(&self, global: &Tensor, frames: &Tensor) -> candle_core::Result<(Tensor, Tensor)> {
        let (att, w) = self.attend(global, frames)?;
        Ok((self.ffn.forward(&att)?, w))
    }
}
