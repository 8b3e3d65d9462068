//! Training steps for the base and residual transformers on frozen tokens.

use candle_core::Tensor;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::reaction::masking::{corrupt, masked_loss};
use crate::reaction::transformer::{Conditioning, MaskedTransformer, ResidualTransformer};
use crate::rng::Rng;
use crate::tokenizer::{lookup_sum, Codebook, MotionTokens};
use crate::train::Trainer;
use crate::video_features::FrameFeatures;

/// One training pair seen through the frozen tokenizer.
#[derive(Debug, Clone)]
pub struct TokenExample {
    pub features: FrameFeatures,
    pub tokens: MotionTokens,
}

fn batch_length(batch: &[&TokenExample], max_tokens: usize) -> Result<usize> {
    let n = batch.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
    if n == 0 || n > max_tokens {
        return Err(Error::invalid(format!(
            "training sequences must hold 1..={max_tokens} tokens, got {n}"
        )));
    }
    Ok(n)
}

fn conditioning(batch: &[&TokenExample], device: &candle_core::Device) -> Result<Conditioning> {
    let feats: Vec<&FrameFeatures> = batch.iter().map(|e| &e.features).collect();
    Conditioning::from_features(&feats, device)
}

/// Masked-token objective on a freshly corrupted batch, without stepping.
pub fn base_loss(model: &MaskedTransformer, batch: &[&TokenExample], rng: &mut Rng, train: bool) -> Result<Tensor> {
    let cfg = model.config();
    let n = batch_length(batch, cfg.max_tokens)?;
    let mut inputs = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    let mut selected = Vec::with_capacity(batch.len());
    for ex in batch {
        let layer0 = &ex.tokens.layers[0];
        let mut padded = layer0.clone();
        padded.resize(n, cfg.pad_id());
        let tau: f64 = rng.random();
        let c = corrupt(&padded, layer0.len(), tau, cfg.mask_id(), cfg.pad_id(), rng)?;
        let mut tgt = layer0.clone();
        tgt.resize(n, 0);
        inputs.push(c.tokens);
        targets.push(tgt);
        selected.push(c.mask_positions);
    }
    let cond = conditioning(batch, model.device())?;
    let logits = if train {
        model.forward(&inputs, &cond, &mut Mode::Train(rng))?
    } else {
        model.forward(&inputs, &cond, &mut Mode::Eval)?
    };
    masked_loss(&logits, &targets, &selected)
}

pub fn base_train_step(model: &MaskedTransformer, trainer: &mut Trainer, batch: &[&TokenExample], rng: &mut Rng) -> Result<f32> {
    let loss = base_loss(model, batch, rng, true)?;
    trainer.step(&loss, "base transformer")
}

/// Cross-entropy over all real positions of a uniformly drawn target layer.
pub fn residual_loss(
    model: &ResidualTransformer,
    batch: &[&TokenExample],
    codebooks: &[Codebook],
    rng: &mut Rng,
    train: bool,
) -> Result<Tensor> {
    let cfg = model.config();
    let n = batch_length(batch, cfg.max_tokens)?;
    let depth = cfg.residual_layers;
    let d = cfg.code_dim;
    let mut sums = Vec::with_capacity(batch.len() * n * d);
    let mut layers = Vec::with_capacity(batch.len());
    let mut pad = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    let mut selected = Vec::with_capacity(batch.len());
    for ex in batch {
        if ex.tokens.depth() < depth + 1 {
            return Err(Error::invalid(format!(
                "residual training needs {} token layers, example has {}",
                depth + 1,
                ex.tokens.depth()
            )));
        }
        let len = ex.tokens.len();
        let j = rng.random_range(1..=depth);
        let partial = MotionTokens {
            layers: ex.tokens.layers[..j].to_vec(),
        };
        let mut s = lookup_sum(&partial, codebooks)?;
        s.resize(n * d, 0.0);
        sums.extend(s);
        let mut tgt = ex.tokens.layers[j].clone();
        tgt.resize(n, 0);
        targets.push(tgt);
        selected.push((0..n).map(|i| i < len).collect::<Vec<_>>());
        pad.push((0..n).map(|i| i >= len).collect::<Vec<_>>());
        layers.push(j);
    }
    let sums = Tensor::from_vec(sums, (batch.len(), n, d), model.device())?;
    let cond = conditioning(batch, model.device())?;
    let logits = if train {
        model.forward(&sums, &layers, &pad, &cond, &mut Mode::Train(rng))?
    } else {
        model.forward(&sums, &layers, &pad, &cond, &mut Mode::Eval)?
    };
    masked_loss(&logits, &targets, &selected)
}

pub fn residual_train_step(
    model: &ResidualTransformer,
    trainer: &mut Trainer,
    batch: &[&TokenExample],
    codebooks: &[Codebook],
    rng: &mut Rng,
) -> Result<f32> {
    let loss = residual_loss(model, batch, codebooks, rng, true)?;
    trainer.step(&loss, "residual transformer")
}
