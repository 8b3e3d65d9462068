//! Mask schedule, training-time corruption and the masked NLL objective.

use candle_core::{Device, Tensor};
use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::nn::log_softmax_last;
use crate::rng::Rng;

/// Fraction of tokens hidden at schedule time `tau`: `cos(pi tau / 2)`.
pub fn cosine_mask_ratio(tau: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("schedule time {tau} outside [0, 1]")));
    }
    if tau == 1.0 {
        return Ok(0.0);
    }
    Ok((std::f64::consts::FRAC_PI_2 * tau).cos())
}

/// Number of revealed tokens after decoding step `step` of `steps`.
pub fn unmasked_after_step(n: usize, step: usize, steps: usize) -> usize {
    let ratio = cosine_mask_ratio(step as f64 / steps as f64).unwrap_or(0.0);
    let masked = (n as f64 * ratio).floor() as usize;
    n - masked.min(n)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptedTokens {
    pub tokens: Vec<u32>,
    pub mask_positions: Vec<bool>,
    pub pad_positions: Vec<bool>,
}

impl CorruptedTokens {
    pub fn masked_count(&self) -> usize {
        self.mask_positions.iter().filter(|&&m| m).count()
    }
}

/// Replaces `max(1, round(ratio * n_valid))` of the non-PAD positions with
/// MASK, chosen uniformly without replacement. `tokens` is the padded
/// sequence; `valid` counts its leading non-PAD positions.
pub fn corrupt(
    tokens: &[u32],
    valid: usize,
    tau: f64,
    mask_id: u32,
    pad_id: u32,
    rng: &mut Rng,
) -> Result<CorruptedTokens> {
    if valid == 0 || valid > tokens.len() {
        return Err(Error::invalid(format!(
            "corruption needs 1..={} valid tokens, got {valid}",
            tokens.len()
        )));
    }
    if tokens[..valid].iter().any(|&t| t >= mask_id) {
        return Err(Error::invalid("tokens to corrupt already contain special ids"));
    }
    let ratio = cosine_mask_ratio(tau)?;
    let count = ((ratio * valid as f64).round() as usize).clamp(1, valid);
    let mut out = tokens.to_vec();
    let mut mask_positions = vec![false; tokens.len()];
    let pad_positions: Vec<bool> = (0..tokens.len()).map(|i| i >= valid).collect();
    for i in valid..tokens.len() {
        out[i] = pad_id;
    }
    for i in sample(rng, valid, count) {
        out[i] = mask_id;
        mask_positions[i] = true;
    }
    Ok(CorruptedTokens {
        tokens: out,
        mask_positions,
        pad_positions,
    })
}

/// Mean over selected positions of `-log softmax(logits)[target]`.
///
/// `logits` is `(B, n, K)`; positions outside `selected` contribute
/// nothing, neither to the value nor to the gradient.
pub fn masked_loss(logits: &Tensor, targets: &[Vec<u32>], selected: &[Vec<bool>]) -> Result<Tensor> {
    let (b, n, k) = logits.dims3()?;
    if targets.len() != b || selected.len() != b {
        return Err(Error::invalid("loss targets do not match the logit batch"));
    }
    let mut tgt = Vec::with_capacity(b * n);
    let mut weight = Vec::with_capacity(b * n);
    for (t_row, s_row) in targets.iter().zip(selected) {
        if t_row.len() != n || s_row.len() != n {
            return Err(Error::invalid("loss targets do not match the logit length"));
        }
        for (&t, &s) in t_row.iter().zip(s_row) {
            if s && t as usize >= k {
                return Err(Error::invalid(format!("target {t} outside vocabulary {k}")));
            }
            tgt.push(if s { t } else { 0 });
            weight.push(if s { 1.0f32 } else { 0.0 });
        }
    }
    let count = weight.iter().filter(|&&w| w > 0.0).count();
    if count == 0 {
        return Err(Error::invalid("masked loss needs at least one selected position"));
    }
    let device: &Device = logits.device();
    let tgt = Tensor::from_vec(tgt, (b, n, 1), device)?;
    let weight = Tensor::from_vec(weight, (b, n), device)?.to_dtype(logits.dtype())?;
    let logp = log_softmax_last(logits)?;
    let picked = logp.gather(&tgt, 2)?.squeeze(2)?;
    let total = (picked * weight)?.sum_all()?;
    Ok((total.neg()? / count as f64)?)
}
