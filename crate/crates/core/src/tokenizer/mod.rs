//! Residual VQ-VAE motion tokenizer.
//!
//! A strided 1D convolutional encoder maps normalized motion `N x D` to a
//! latent `floor(N/4) x d_c`, a stack of codebooks quantizes it residually,
//! and a mirrored decoder reconstructs the motion from the summed codes.
//! Codebooks learn by exponential moving average and dead entries are
//! re-seeded from current encoder outputs.

pub mod network;
pub mod quantizer;

use std::path::Path;

use candle_core::{Device, Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{smooth_l1, to_flat, ParamStore};
use crate::pose_codec::{MotionSequence, NormStats};
use crate::rng::{substream, Rng};
use crate::train::{Trainer, WarmupSchedule};

pub use network::DOWNSAMPLE;
pub use quantizer::{lookup_sum, quantize_layer, rvq_encode, Codebook, MotionTokens, ResidualEncoding};

use network::{MotionDecoder, MotionEncoder};

const FORMAT: &str = "reactgen/tokenizer";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    /// Entries per codebook (K).
    pub codebook_size: usize,
    /// Entry width (d_c).
    pub code_dim: usize,
    /// Residual layers beyond the base layer (V).
    pub residual_layers: usize,
    pub width: usize,
    pub res_depth: usize,
    /// Commitment weight.
    pub beta: f32,
    pub ema_decay: f32,
    /// EMA count below which an entry is re-seeded.
    pub reset_threshold: f32,
    /// Steps between reset sweeps.
    pub reset_every: usize,
    /// Training crop length in frames; must be a multiple of 4.
    pub window_frames: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub warmup_iters: usize,
    pub weight_decay: f64,
    pub zero_init_output: bool,
}

impl TokenizerConfig {
    pub fn full() -> Self {
        TokenizerConfig {
            codebook_size: 512,
            code_dim: 512,
            residual_layers: 5,
            width: 512,
            res_depth: 3,
            beta: 0.02,
            ema_decay: 0.99,
            reset_threshold: 1.0,
            reset_every: 256,
            window_frames: 64,
            batch_size: 256,
            epochs: 10,
            learning_rate: 2e-4,
            warmup_iters: 20,
            weight_decay: 0.0,
            zero_init_output: false,
        }
    }

    pub fn toy() -> Self {
        TokenizerConfig {
            codebook_size: 32,
            code_dim: 16,
            residual_layers: 2,
            width: 64,
            res_depth: 2,
            reset_every: 50,
            window_frames: 32,
            batch_size: 16,
            epochs: 300,
            learning_rate: 2e-3,
            ..Self::full()
        }
    }

    pub fn quantizer_depth(&self) -> usize {
        self.residual_layers + 1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("tokenizer: {m}")));
        if self.codebook_size < 2 {
            return fail("codebook_size must be at least 2");
        }
        if self.code_dim == 0 || self.width == 0 || self.batch_size == 0 {
            return fail("code_dim, width and batch_size must be positive");
        }
        if self.window_frames < DOWNSAMPLE || self.window_frames % DOWNSAMPLE != 0 {
            return fail("window_frames must be a positive multiple of 4");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return fail("ema_decay must lie in [0, 1]");
        }
        if self.beta < 0.0 || self.learning_rate <= 0.0 {
            return fail("beta must be non-negative and learning_rate positive");
        }
        Ok(())
    }
}

/// Encoder output for one motion, `frames x dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl LatentSequence {
    pub fn downsample_ratio(&self, motion_frames: usize) -> f64 {
        self.frames as f64 / motion_frames as f64
    }
}

/// Scalar parts of the VQ objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VqLossTerms {
    pub reconstruction: f32,
    /// ||sg[z] - q||^2; reported only, the codebooks learn by EMA.
    pub codebook_term: f32,
    /// ||z - sg[q]||^2, weighted by `beta` in the total.
    pub commitment_term: f32,
    pub beta: f32,
    pub total: f32,
}

pub struct MotionTokenizer {
    config: TokenizerConfig,
    feature_dim: usize,
    params: ParamStore,
    encoder: MotionEncoder,
    decoder: MotionDecoder,
    codebooks: Vec<Codebook>,
    codebooks_seeded: bool,
    norm: Option<NormStats>,
}

fn batch_tensor(motions: &[&MotionSequence], device: &Device) -> Result<Tensor> {
    let first = motions
        .first()
        .ok_or_else(|| Error::invalid("empty motion batch"))?;
    let (n, d) = (first.frames(), first.dim());
    let mut data = Vec::with_capacity(motions.len() * n * d);
    for m in motions {
        if m.frames() != n || m.dim() != d {
            return Err(Error::invalid("motion batch must share one shape"));
        }
        data.extend_from_slice(m.data());
    }
    // (B, N, D) -> (B, D, N)
    Ok(Tensor::from_vec(data, (motions.len(), n, d), device)?
        .transpose(1, 2)?
        .contiguous()?)
}

/// `(B, C, L)` tensor to row-major `(B * L) x C` rows.
fn channel_rows(t: &Tensor) -> Result<Vec<f32>> {
    to_flat(&t.transpose(1, 2)?.contiguous()?)
}

fn rows_to_channels(rows: Vec<f32>, batch: usize, len: usize, channels: usize, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(rows, (batch, len, channels), device)?
        .transpose(1, 2)?
        .contiguous()?)
}

impl MotionTokenizer {
    pub fn new(config: TokenizerConfig, feature_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(seed, "tokenizer-init");
        let encoder = MotionEncoder::new(&mut params, feature_dim, config.width, config.code_dim, config.res_depth)?;
        let decoder = MotionDecoder::new(
            &mut params,
            config.code_dim,
            config.width,
            feature_dim,
            config.res_depth,
            config.zero_init_output,
        )?;
        let mut rng = substream(seed, "codebook-init");
        let codebooks = (0..config.quantizer_depth())
            .map(|_| {
                let samples: Vec<f32> = (0..config.codebook_size * config.code_dim)
                    .map(|_| rand_distr::Distribution::<f32>::sample(&rand_distr::StandardNormal, &mut rng))
                    .collect();
                Codebook::new(config.codebook_size, config.code_dim, samples)
            })
            .collect::<Result<_>>()?;
        Ok(MotionTokenizer {
            config,
            feature_dim,
            params,
            encoder,
            decoder,
            codebooks,
            codebooks_seeded: false,
            norm: None,
        })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn codebooks(&self) -> &[Codebook] {
        &self.codebooks
    }

    pub fn set_codebooks(&mut self, codebooks: Vec<Codebook>) -> Result<()> {
        if codebooks.len() != self.config.quantizer_depth()
            || codebooks
                .iter()
                .any(|c| c.size() != self.config.codebook_size || c.dim() != self.config.code_dim)
        {
            return Err(Error::invalid("codebooks do not match the tokenizer config"));
        }
        self.codebooks = codebooks;
        self.codebooks_seeded = true;
        Ok(())
    }

    pub fn norm_stats(&self) -> Option<&NormStats> {
        self.norm.as_ref()
    }

    pub fn set_norm_stats(&mut self, stats: NormStats) -> Result<()> {
        stats.validate()?;
        if stats.dim() != self.feature_dim {
            return Err(Error::Shape {
                what: "normalization stats".into(),
                expected: self.feature_dim,
                found: stats.dim(),
            });
        }
        self.norm = Some(stats);
        Ok(())
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    fn check_motion(&self, m: &MotionSequence) -> Result<()> {
        if m.dim() != self.feature_dim {
            return Err(Error::Shape {
                what: "motion feature width".into(),
                expected: self.feature_dim,
                found: m.dim(),
            });
        }
        if m.frames() < DOWNSAMPLE {
            return Err(Error::invalid(format!(
                "motion of {} frames is shorter than one {DOWNSAMPLE}-frame window",
                m.frames()
            )));
        }
        Ok(())
    }

    /// Encoder forward on a `(B, D, N)` tensor.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.encoder.forward(x)?)
    }

    /// Decoder forward on a `(B, d_c, n)` tensor.
    pub fn decode_tensor(&self, q: &Tensor) -> Result<Tensor> {
        Ok(self.decoder.forward(q)?)
    }

    /// Latent of one normalized motion.
    pub fn encode(&self, motion: &MotionSequence) -> Result<LatentSequence> {
        self.check_motion(motion)?;
        let x = batch_tensor(&[motion], self.device())?;
        let z = self.encode_tensor(&x)?;
        let frames = z.dim(2)?;
        Ok(LatentSequence {
            frames,
            dim: self.config.code_dim,
            data: channel_rows(&z)?,
        })
    }

    pub fn tokenize(&self, motion: &MotionSequence) -> Result<MotionTokens> {
        let z = self.encode(motion)?;
        Ok(rvq_encode(&z.data, &self.codebooks)?.tokens)
    }

    /// Decodes summed code vectors (`n x d_c` rows) into `4 n` normalized frames.
    pub fn decode(&self, quantized_sum: &[f32]) -> Result<MotionSequence> {
        let dim = self.config.code_dim;
        if quantized_sum.is_empty() || quantized_sum.len() % dim != 0 {
            return Err(Error::invalid("decoder input must be whole rows of code width"));
        }
        let n = quantized_sum.len() / dim;
        let q = rows_to_channels(quantized_sum.to_vec(), 1, n, dim, self.device())?;
        let out = self.decode_tensor(&q)?;
        let frames = out.dim(2)?;
        MotionSequence::new(frames, self.feature_dim, channel_rows(&out)?)
    }

    pub fn decode_tokens(&self, tokens: &MotionTokens) -> Result<MotionSequence> {
        tokens.validate(self.config.codebook_size)?;
        self.decode(&lookup_sum(tokens, &self.codebooks)?)
    }

    /// Encode then decode; optionally bypasses quantization.
    pub fn reconstruct(&self, motion: &MotionSequence, quantize: bool) -> Result<MotionSequence> {
        let z = self.encode(motion)?;
        if quantize {
            self.decode(&rvq_encode(&z.data, &self.codebooks)?.quantized_sum())
        } else {
            self.decode(&z.data)
        }
    }

    /// Per-feature MSE between raw motions and their reconstructions, taken
    /// after denormalization and contact snapping like any decoded motion.
    pub fn reconstruction_mse(&self, raw: &[MotionSequence], quantize: bool) -> Result<f64> {
        let stats = self
            .norm
            .as_ref()
            .ok_or_else(|| Error::invalid("tokenizer carries no normalization statistics"))?;
        let (mut total, mut count) = (0.0f64, 0usize);
        for m in raw {
            let mut r = stats.denormalize(&self.reconstruct(&stats.normalize(m)?, quantize)?)?;
            r.snap_contacts()?;
            total += r
                .data()
                .iter()
                .zip(m.data())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>();
            count += m.data().len();
        }
        if count == 0 {
            return Err(Error::invalid("no motions to reconstruct"));
        }
        Ok(total / count as f64)
    }

    /// VQ training objective with a straight-through quantizer. `q` holds constant code
    /// values with the same shape as `z`; only `z` and the decoder receive
    /// gradients, and the codebook term is reported but not backpropagated.
    pub fn vq_objective(&self, x: &Tensor, z: &Tensor, q: &Tensor) -> Result<(Tensor, VqLossTerms)> {
        let q = q.detach();
        let q_st = (z + (&q - z)?.detach())?;
        let recon = self.decode_tensor(&q_st)?;
        let l_re = smooth_l1(&recon, x)?;
        let commit = (z - &q)?.sqr()?.mean_all()?;
        let codebook_term = (z.detach() - &q)?.sqr()?.mean_all()?;
        let beta = self.config.beta;
        let total = (&l_re + (&commit * beta as f64)?)?;
        let terms = VqLossTerms {
            reconstruction: l_re.to_scalar::<f32>()?,
            codebook_term: codebook_term.to_scalar::<f32>()?,
            commitment_term: commit.to_scalar::<f32>()?,
            beta,
            total: total.to_scalar::<f32>()? + codebook_term.to_scalar::<f32>()?,
        };
        Ok((total, terms))
    }

    fn seed_codebooks(&mut self, rows: &[f32], rng: &mut Rng) -> Result<()> {
        let (k, dim) = (self.config.codebook_size, self.config.code_dim);
        let mut residual = rows.to_vec();
        for l in 0..self.codebooks.len() {
            let cb = Codebook::from_samples(k, dim, &residual, rng)?;
            let (_, q) = quantize_layer(&residual, &cb)?;
            residual.iter_mut().zip(&q).for_each(|(r, v)| *r -= v);
            self.codebooks[l] = cb;
        }
        self.codebooks_seeded = true;
        Ok(())
    }

    /// One optimization step on equal-length normalized windows.
    pub fn train_step(&mut self, batch: &[&MotionSequence], trainer: &mut Trainer, rng: &mut Rng) -> Result<VqLossTerms> {
        for m in batch {
            self.check_motion(m)?;
        }
        let x = batch_tensor(batch, self.device())?;
        let z = self.encode_tensor(&x)?;
        let (b, c, n) = z.dims3()?;
        let rows = channel_rows(&z)?;
        if !self.codebooks_seeded {
            self.seed_codebooks(&rows, rng)?;
        }
        let enc = rvq_encode(&rows, &self.codebooks)?;
        let q = rows_to_channels(enc.quantized_sum(), b, n, c, self.device())?;
        let (loss, terms) = self.vq_objective(&x, &z, &q)?;
        if !terms.total.is_finite() {
            return Err(Error::Numerical(format!(
                "tokenizer loss non-finite at iteration {}: {terms:?}",
                trainer.iteration() + 1
            )));
        }
        trainer.step(&loss, "tokenizer")?;

        let decay = self.config.ema_decay;
        for (l, cb) in self.codebooks.iter_mut().enumerate() {
            let assignments: Vec<usize> = enc.tokens.layers[l].iter().map(|&t| t as usize).collect();
            cb.ema_update(&enc.layer_inputs[l], &assignments, decay)?;
        }
        if self.config.reset_every > 0 && trainer.iteration() % self.config.reset_every == 0 {
            for (l, cb) in self.codebooks.iter_mut().enumerate() {
                let replaced = cb.reset_dead(self.config.reset_threshold, &enc.layer_inputs[l], rng)?;
                if !replaced.is_empty() {
                    log::debug!("layer {l}: reset {} dead codes", replaced.len());
                }
            }
        }
        Ok(terms)
    }

    pub fn trainer(&self) -> Result<Trainer> {
        Trainer::new(
            self.params.vars(),
            WarmupSchedule {
                peak: self.config.learning_rate,
                warmup_iters: self.config.warmup_iters,
            },
            self.config.weight_decay,
        )
    }

    /// Fraction of base-layer codes whose EMA count is non-negligible.
    pub fn codebook_usage(&self, layer: usize) -> f32 {
        let cb = &self.codebooks[layer];
        let used = cb.ema_counts().iter().filter(|&&c| c >= 1e-3).count();
        used as f32 / cb.size() as f32
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new(FORMAT);
        for (name, t) in self.params.tensors() {
            ck.tensors.insert(format!("net.{name}"), t);
        }
        let (k, d) = (self.config.codebook_size, self.config.code_dim);
        for (l, cb) in self.codebooks.iter().enumerate() {
            ck.tensors.insert(
                format!("codebook.{l}.entries"),
                Tensor::from_vec(cb.entries().to_vec(), (k, d), self.device())?,
            );
            ck.tensors.insert(
                format!("codebook.{l}.ema_counts"),
                Tensor::from_vec(cb.ema_counts().to_vec(), k, self.device())?,
            );
            ck.tensors.insert(
                format!("codebook.{l}.ema_sums"),
                Tensor::from_vec(cb.ema_sums().to_vec(), (k, d), self.device())?,
            );
        }
        ck.insert_json("config", &self.config)?;
        ck.insert_meta("feature_dim", self.feature_dim.to_string());
        if let Some(n) = &self.norm {
            ck.insert_json("norm_stats", n)?;
        }
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path, FORMAT, "train-tokenizer")?;
        let config: TokenizerConfig = ck.json("config")?;
        let feature_dim: usize = ck
            .meta("feature_dim")?
            .parse()
            .map_err(|_| Error::invalid("bad feature_dim in tokenizer checkpoint"))?;
        let mut tok = MotionTokenizer::new(config.clone(), feature_dim, 0)?;
        tok.params.load(&ck.tensors, "net.")?;
        let mut books = Vec::with_capacity(config.quantizer_depth());
        for l in 0..config.quantizer_depth() {
            let get = |s: &str| -> Result<Vec<f32>> { to_flat(ck.tensor(&format!("codebook.{l}.{s}"))?) };
            books.push(Codebook::with_state(
                config.codebook_size,
                config.code_dim,
                get("entries")?,
                get("ema_counts")?,
                get("ema_sums")?,
            )?);
        }
        tok.set_codebooks(books)?;
        if ck.metadata.contains_key("norm_stats") {
            tok.set_norm_stats(ck.json("norm_stats")?)?;
        }
        Ok(tok)
    }
}
