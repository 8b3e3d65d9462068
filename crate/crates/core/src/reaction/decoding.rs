//! Iterative parallel decoding and the full video-to-motion generation path.

use candle_core::Tensor;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::nn::{softmax_last, Mode};
use crate::pose_codec::MotionSequence;
use crate::reaction::masking::unmasked_after_step;
use crate::reaction::transformer::{Conditioning, MaskedTransformer, ResidualTransformer};
use crate::reaction::GenerationConfig;
use crate::rng::{substream, Rng};
use crate::tokenizer::{lookup_sum, Codebook, MotionTokenizer, MotionTokens, DOWNSAMPLE};
use crate::video_features::FrameFeatures;

/// Revealed positions after every decoding step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeTrace {
    pub revealed: Vec<Vec<bool>>,
}

impl DecodeTrace {
    pub fn counts(&self) -> Vec<usize> {
        self.revealed
            .iter()
            .map(|r| r.iter().filter(|&&x| x).count())
            .collect()
    }
}

/// Draws from `probs` (need not be normalized) with one uniform variate.
fn sample_index(probs: &[f32], rng: &mut Rng) -> usize {
    let total: f64 = probs.iter().map(|&p| p as f64).sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &p) in probs.iter().enumerate() {
        u -= p as f64;
        if u < 0.0 {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn generate_base(model: &MaskedTransformer, cond: &Conditioning, gen: &GenerationConfig, rng: &mut Rng) -> Result<Vec<u32>> {
    Ok(generate_base_traced(model, cond, gen, rng)?.0)
}

/// Starts from an all-MASK canvas; each step samples every masked
/// position, keeps the most confident samples until the schedule's reveal
/// count is met, and re-masks the rest. Revealed tokens stay fixed.
pub fn generate_base_traced(
    model: &MaskedTransformer,
    cond: &Conditioning,
    gen: &GenerationConfig,
    rng: &mut Rng,
) -> Result<(Vec<u32>, DecodeTrace)> {
    gen.validate(model.config().max_tokens)?;
    if cond.batch() != 1 {
        return Err(Error::invalid("decoding runs on one video at a time"));
    }
    let n = gen.target_length;
    let mask_id = model.config().mask_id();
    let mut tokens = vec![mask_id; n];
    let mut revealed = vec![false; n];
    let mut trace = DecodeTrace { revealed: Vec::new() };
    for step in 1..=gen.iterations {
        let logits = model.forward(&[tokens.clone()], cond, &mut Mode::Eval)?;
        let logits = logits.squeeze(0)?;
        let rows: Vec<Vec<f32>> = if gen.temperature > 0.0 {
            softmax_last(&(logits / gen.temperature as f64)?)?.to_vec2()?
        } else {
            logits.to_vec2()?
        };
        let mut candidates: Vec<(usize, u32, f32)> = Vec::new();
        for (pos, row) in rows.iter().enumerate() {
            if revealed[pos] {
                continue;
            }
            let pick = if gen.temperature > 0.0 {
                sample_index(row, rng)
            } else {
                argmax(row)
            };
            let confidence = if gen.temperature > 0.0 { row[pick] } else { f32::INFINITY };
            candidates.push((pos, pick as u32, confidence));
        }
        let already = revealed.iter().filter(|&&r| r).count();
        let target = unmasked_after_step(n, step, gen.iterations).max(already);
        // stable sort keeps lower positions first among equal confidences
        candidates.sort_by(|a, b| b.2.total_cmp(&a.2));
        for &(pos, tok, _) in candidates.iter().take(target - already) {
            tokens[pos] = tok;
            revealed[pos] = true;
        }
        trace.revealed.push(revealed.clone());
    }
    if tokens.iter().any(|&t| t == mask_id) {
        return Err(Error::Numerical("decoding finished with masked positions".into()));
    }
    Ok((tokens, trace))
}

/// Summed code entries of layers `0..depth` as a `(1, n, d_c)` tensor.
fn code_sum_tensor(tokens: &MotionTokens, depth: usize, codebooks: &[Codebook], model: &ResidualTransformer) -> Result<Tensor> {
    let partial = MotionTokens {
        layers: tokens.layers[..depth].to_vec(),
    };
    let sums = lookup_sum(&partial, codebooks)?;
    let n = tokens.len();
    let d = codebooks[0].dim();
    Ok(Tensor::from_vec(sums, (1, n, d), model.device())?)
}

/// Greedy prediction of layer `layer` given layers `0..layer` in `tokens`.
pub fn residual_predict(
    model: &ResidualTransformer,
    tokens: &MotionTokens,
    layer: usize,
    cond: &Conditioning,
    codebooks: &[Codebook],
) -> Result<Vec<u32>> {
    if layer == 0 || layer > model.config().residual_layers || layer > tokens.depth() {
        return Err(Error::invalid(format!(
            "cannot predict layer {layer} from {} known layers (model covers 1..={})",
            tokens.depth(),
            model.config().residual_layers
        )));
    }
    let sums = code_sum_tensor(tokens, layer, codebooks, model)?;
    let pad = vec![vec![false; tokens.len()]];
    let logits = model.forward(&sums, &[layer], &pad, cond, &mut Mode::Eval)?;
    let rows: Vec<Vec<f32>> = logits.squeeze(0)?.to_vec2()?;
    Ok(rows.iter().map(|r| argmax(r) as u32).collect())
}

/// Video features to a denormalized reaction of `4 n` frames.
pub fn generate_reaction(
    features: &FrameFeatures,
    gen: &GenerationConfig,
    base: &MaskedTransformer,
    residual: Option<&ResidualTransformer>,
    tokenizer: &MotionTokenizer,
) -> Result<MotionSequence> {
    let stats = tokenizer
        .norm_stats()
        .ok_or_else(|| Error::invalid("tokenizer carries no normalization statistics"))?;
    let cond = Conditioning::from_features(&[features], base.device())?;
    let mut rng = substream(gen.seed, "decode");
    let layer0 = generate_base(base, &cond, gen, &mut rng)?;
    let mut tokens = MotionTokens { layers: vec![layer0] };
    let depth = tokenizer.config().quantizer_depth();
    if depth > 1 {
        let model = residual.ok_or_else(|| Error::invalid("tokenizer has residual layers but no residual model was given"))?;
        for layer in 1..depth {
            let next = residual_predict(model, &tokens, layer, &cond, tokenizer.codebooks())?;
            tokens.layers.push(next);
        }
    }
    let normalized = tokenizer.decode_tokens(&tokens)?;
    debug_assert_eq!(normalized.frames(), DOWNSAMPLE * gen.target_length);
    let mut motion = stats.denormalize(&normalized)?;
    motion.snap_contacts()?;
    Ok(motion)
}
