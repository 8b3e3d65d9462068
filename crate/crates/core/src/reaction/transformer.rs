//! Pre-LN decoder stack shared by the base and residual transformers.
//!
//! Stream layout: slot 0 carries the projected intention vector, slots
//! `1..=n` carry token inputs plus learned positional embeddings. Every
//! block runs masked self-attention over the whole stream, optional
//! cross-attention into the projected frame features, then an FFN.

use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Embedding, Linear};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{additive_key_mask, dropout, FeedForward, LayerNorm, Mode, MultiHeadAttention, ParamStore};
use crate::reaction::intention::{IntentionEmbedding, IntentionExtractor};
use crate::reaction::ModelConfig;
use crate::train::{Trainer, WarmupSchedule};
use crate::video_features::{global_pool, FrameFeatures};

const BASE_FORMAT: &str = "reactgen/base-transformer";
const RESIDUAL_FORMAT: &str = "reactgen/residual-transformer";

/// Frame features of a batch of videos, ready for the network.
#[derive(Debug, Clone)]
pub struct Conditioning {
    /// Pooled global feature `(B, 1, d_vl)`.
    pub global: Tensor,
    /// Per-frame features `(B, T, d_vl)`.
    pub frames: Tensor,
}

impl Conditioning {
    /// Stacks videos that share frame count and width.
    pub fn from_features(batch: &[&FrameFeatures], device: &Device) -> Result<Self> {
        let first = batch
            .first()
            .ok_or_else(|| Error::invalid("conditioning needs at least one video"))?;
        let (t, d) = (first.frames(), first.dim());
        let mut frames = Vec::with_capacity(batch.len() * t * d);
        let mut global = Vec::with_capacity(batch.len() * d);
        for f in batch {
            if f.frames() != t || f.dim() != d {
                return Err(Error::Shape {
                    what: format!("frame features of {}", f.source_id()),
                    expected: t * d,
                    found: f.frames() * f.dim(),
                });
            }
            frames.extend_from_slice(f.data());
            global.extend(global_pool(f)?.vector);
        }
        let b = batch.len();
        Ok(Conditioning {
            global: Tensor::from_vec(global, (b, 1, d), device)?,
            frames: Tensor::from_vec(frames, (b, t, d), device)?,
        })
    }

    pub fn batch(&self) -> usize {
        self.frames.dims()[0]
    }
}

/// Attention weights collected during one forward pass.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    /// Intention attention over frames `(B, 1, T)`, when IIE is enabled.
    pub intention: Option<Tensor>,
    /// Per block, `(B, heads, n + 1, n + 1)`.
    pub self_attention: Vec<Tensor>,
    /// Per block, `(B, heads, n + 1, T)`, when DIE is enabled.
    pub cross_attention: Vec<Tensor>,
}

struct Block {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    cross: Option<(LayerNorm, MultiHeadAttention)>,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

struct Backbone {
    iie: Option<IntentionExtractor>,
    intention_proj: Linear,
    frame_proj: Option<Linear>,
    positions: Tensor,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    head: Linear,
    dropout: f32,
    max_tokens: usize,
    vision_dim: usize,
}

impl Backbone {
    fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.latent_dim;
        let iie = if cfg.use_iie {
            Some(IntentionExtractor::new(ps, "iie", cfg.vision_dim, cfg.intention_hidden)?)
        } else {
            None
        };
        let intention_proj = ps.linear("intention_proj", cfg.vision_dim, d, true)?;
        let frame_proj = if cfg.use_die {
            Some(ps.linear("frame_proj", cfg.vision_dim, d, true)?)
        } else {
            None
        };
        let positions = ps.normal("positions".into(), &[cfg.max_tokens, d], 0.02)?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let p = format!("block{i}");
            let cross = if cfg.use_die {
                Some((
                    ps.layer_norm(&format!("{p}.ln_cross"), d)?,
                    MultiHeadAttention::new(ps, &format!("{p}.cross"), d, d, cfg.heads)?,
                ))
            } else {
                None
            };
            blocks.push(Block {
                ln_self: ps.layer_norm(&format!("{p}.ln_self"), d)?,
                self_attn: MultiHeadAttention::new(ps, &format!("{p}.self"), d, d, cfg.heads)?,
                cross,
                ln_ffn: ps.layer_norm(&format!("{p}.ln_ffn"), d)?,
                ffn: FeedForward::new(ps, &format!("{p}.ffn"), d, cfg.ffn_dim, d)?,
            });
        }
        Ok(Backbone {
            iie,
            intention_proj,
            frame_proj,
            positions,
            blocks,
            ln_out: ps.layer_norm("ln_out", d)?,
            head: ps.linear("head", d, cfg.vocab, true)?,
            dropout: cfg.dropout,
            max_tokens: cfg.max_tokens,
            vision_dim: cfg.vision_dim,
        })
    }

    fn intention(&self, cond: &Conditioning) -> Result<IntentionEmbedding> {
        let (vector, weights) = match &self.iie {
            Some(iie) => {
                let (v, w) = iie.forward(&cond.global, &cond.frames)?;
                (v, Some(w))
            }
            None => (cond.global.clone(), None),
        };
        let projected = self.intention_proj.forward(&vector)?;
        Ok(IntentionEmbedding {
            vector,
            projected,
            weights,
        })
    }

    /// `inputs` is `(B, n, d_l)`; `pad` flags PAD positions per row.
    /// Returns logits `(B, n, K)`.
    fn forward(
        &self,
        inputs: &Tensor,
        cond: &Conditioning,
        pad: &[Vec<bool>],
        mode: &mut Mode,
        keep_trace: bool,
    ) -> Result<(Tensor, Option<AttentionTrace>)> {
        let (b, n, _) = inputs.dims3()?;
        if n == 0 || n > self.max_tokens {
            return Err(Error::invalid(format!(
                "token length {n} outside [1, {}]",
                self.max_tokens
            )));
        }
        if cond.batch() != b || cond.frames.dims()[2] != self.vision_dim {
            return Err(Error::Shape {
                what: "conditioning batch x width".into(),
                expected: b * self.vision_dim,
                found: cond.batch() * cond.frames.dims()[2],
            });
        }
        let intent = self.intention(cond)?;
        let tokens = inputs.broadcast_add(&self.positions.narrow(0, 0, n)?)?;
        let mut h = Tensor::cat(&[&intent.projected, &tokens], 1)?;
        h = dropout(&h, self.dropout, mode)?;

        let blocked: Vec<Vec<bool>> = pad
            .iter()
            .map(|row| std::iter::once(false).chain(row.iter().copied()).collect())
            .collect();
        let key_mask = additive_key_mask(&blocked, inputs.device())?;
        let memory = match &self.frame_proj {
            Some(p) => Some(p.forward(&cond.frames)?),
            None => None,
        };

        let mut trace = AttentionTrace {
            intention: intent.weights.clone(),
            self_attention: Vec::new(),
            cross_attention: Vec::new(),
        };
        for block in &self.blocks {
            let a = block.ln_self.forward(&h)?;
            let (o, w) = block.self_attn.forward(&a, &a, Some(&key_mask))?;
            h = (h + dropout(&o, self.dropout, mode)?)?;
            if keep_trace {
                trace.self_attention.push(w);
            }
            if let (Some((ln, cross)), Some(mem)) = (&block.cross, &memory) {
                let a = ln.forward(&h)?;
                let (o, w) = cross.forward(&a, mem, None)?;
                h = (h + dropout(&o, self.dropout, mode)?)?;
                if keep_trace {
                    trace.cross_attention.push(w);
                }
            }
            let a = block.ln_ffn.forward(&h)?;
            h = (&h + dropout(&block.ffn.forward(&a)?, self.dropout, mode)?)?;
        }
        let out = self.ln_out.forward(&h)?.narrow(1, 1, n)?;
        let logits = self.head.forward(&out)?;
        Ok((logits, keep_trace.then_some(trace)))
    }
}

fn trainer_for(ps: &ParamStore, lr: f64, warmup: usize, weight_decay: f64) -> Result<Trainer> {
    Trainer::new(
        ps.vars(),
        WarmupSchedule {
            peak: lr,
            warmup_iters: warmup,
        },
        weight_decay,
    )
}

fn save_model(ps: &ParamStore, cfg: &ModelConfig, format: &str, digest: &str, path: &Path) -> Result<()> {
    let mut ck = Checkpoint::new(format);
    ck.tensors = ps.tensors();
    ck.insert_json("config", cfg)?;
    ck.insert_meta("tokenizer_digest", digest);
    ck.save(path)
}

fn check_digest(ck: &Checkpoint, path: &Path, expected: Option<&str>) -> Result<String> {
    let found = ck.meta("tokenizer_digest")?.to_string();
    if let Some(e) = expected {
        if e != found {
            return Err(Error::Config(format!(
                "{} was trained against tokenizer {found}, but the current tokenizer is {e}; retrain it",
                path.display()
            )));
        }
    }
    Ok(found)
}

/// Predicts base-layer tokens from a partially masked sequence.
pub struct MaskedTransformer {
    config: ModelConfig,
    params: ParamStore,
    backbone: Backbone,
    token_embedding: Embedding,
    tokenizer_digest: String,
}

impl MaskedTransformer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(seed, "base-transformer");
        let backbone = Backbone::new(&mut params, &config)?;
        let token_embedding = params.embedding("tokens", config.vocab + 2, config.latent_dim)?;
        Ok(MaskedTransformer {
            config,
            params,
            backbone,
            token_embedding,
            tokenizer_digest: String::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn tokenizer_digest(&self) -> &str {
        &self.tokenizer_digest
    }

    pub fn set_tokenizer_digest(&mut self, digest: impl Into<String>) {
        self.tokenizer_digest = digest.into();
    }

    pub fn trainer(&self, lr: f64, warmup: usize, weight_decay: f64) -> Result<Trainer> {
        trainer_for(&self.params, lr, warmup, weight_decay)
    }

    pub fn intention(&self, cond: &Conditioning) -> Result<IntentionEmbedding> {
        self.backbone.intention(cond)
    }

    fn embed(&self, tokens: &[Vec<u32>]) -> Result<(Tensor, Vec<Vec<bool>>)> {
        let n = tokens.first().map_or(0, Vec::len);
        let pad_id = self.config.pad_id();
        let mut flat = Vec::with_capacity(tokens.len() * n);
        for row in tokens {
            if row.len() != n {
                return Err(Error::invalid("token rows in a batch must share one length"));
            }
            if let Some(bad) = row.iter().find(|&&t| t > pad_id) {
                return Err(Error::invalid(format!("token id {bad} outside vocabulary")));
            }
            flat.extend_from_slice(row);
        }
        let pad = tokens
            .iter()
            .map(|row| row.iter().map(|&t| t == pad_id).collect())
            .collect();
        let ids = Tensor::from_vec(flat, (tokens.len(), n), self.device())?;
        Ok((self.token_embedding.forward(&ids)?, pad))
    }

    /// Logits `(B, n, K)` for token rows that may contain MASK and PAD ids.
    pub fn forward(&self, tokens: &[Vec<u32>], cond: &Conditioning, mode: &mut Mode) -> Result<Tensor> {
        let (x, pad) = self.embed(tokens)?;
        Ok(self.backbone.forward(&x, cond, &pad, mode, false)?.0)
    }

    pub fn forward_traced(&self, tokens: &[Vec<u32>], cond: &Conditioning) -> Result<(Tensor, AttentionTrace)> {
        let (x, pad) = self.embed(tokens)?;
        let (logits, trace) = self.backbone.forward(&x, cond, &pad, &mut Mode::Eval, true)?;
        Ok((logits, trace.expect("trace requested")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_model(&self.params, &self.config, BASE_FORMAT, &self.tokenizer_digest, path)
    }

    /// Loads a checkpoint; with `expected_digest`, refuses checkpoints
    /// trained against another tokenizer.
    pub fn load(path: &Path, expected_digest: Option<&str>) -> Result<Self> {
        let ck = Checkpoint::load(path, BASE_FORMAT, "train-base")?;
        let config: ModelConfig = ck.json("config")?;
        let digest = check_digest(&ck, path, expected_digest)?;
        let mut model = Self::new(config, 0)?;
        model.params.load(&ck.tensors, "")?;
        model.tokenizer_digest = digest;
        Ok(model)
    }
}

/// Predicts quantizer layer `j` from the summed codes of layers `0..j`.
pub struct ResidualTransformer {
    config: ModelConfig,
    params: ParamStore,
    backbone: Backbone,
    code_proj: Linear,
    layer_embedding: Embedding,
    tokenizer_digest: String,
}

impl ResidualTransformer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.residual_layers == 0 || config.code_dim == 0 {
            return Err(Error::Config(
                "residual transformer needs at least one residual layer and a code width".into(),
            ));
        }
        let mut params = ParamStore::new(seed, "residual-transformer");
        let backbone = Backbone::new(&mut params, &config)?;
        let code_proj = params.linear("code_proj", config.code_dim, config.latent_dim, true)?;
        let layer_embedding = params.embedding("layers", config.residual_layers, config.latent_dim)?;
        Ok(ResidualTransformer {
            config,
            params,
            backbone,
            code_proj,
            layer_embedding,
            tokenizer_digest: String::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn tokenizer_digest(&self) -> &str {
        &self.tokenizer_digest
    }

    pub fn set_tokenizer_digest(&mut self, digest: impl Into<String>) {
        self.tokenizer_digest = digest.into();
    }

    pub fn trainer(&self, lr: f64, warmup: usize, weight_decay: f64) -> Result<Trainer> {
        trainer_for(&self.params, lr, warmup, weight_decay)
    }

    /// `code_sums` is `(B, n, d_c)`; `targets[b]` is the layer to predict,
    /// in `1..=V`; `pad` flags PAD positions.
    pub fn forward(
        &self,
        code_sums: &Tensor,
        targets: &[usize],
        pad: &[Vec<bool>],
        cond: &Conditioning,
        mode: &mut Mode,
    ) -> Result<Tensor> {
        let b = code_sums.dims3()?.0;
        if targets.len() != b || pad.len() != b {
            return Err(Error::invalid("residual batch parts disagree in size"));
        }
        let mut ids = Vec::with_capacity(b);
        for &t in targets {
            if t == 0 || t > self.config.residual_layers {
                return Err(Error::invalid(format!(
                    "residual layer {t} outside [1, {}]",
                    self.config.residual_layers
                )));
            }
            ids.push(t as u32 - 1);
        }
        let ids = Tensor::from_vec(ids, (b, 1), self.device())?;
        let layer = self.layer_embedding.forward(&ids)?;
        let x = self
            .code_proj
            .forward(&code_sums.to_dtype(DType::F32)?)?
            .broadcast_add(&layer)?;
        Ok(self.backbone.forward(&x, cond, pad, mode, false)?.0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_model(&self.params, &self.config, RESIDUAL_FORMAT, &self.tokenizer_digest, path)
    }

    pub fn load(path: &Path, expected_digest: Option<&str>) -> Result<Self> {
        let ck = Checkpoint::load(path, RESIDUAL_FORMAT, "train-residual")?;
        let config: ModelConfig = ck.json("config")?;
        let digest = check_digest(&ck, path, expected_digest)?;
        let mut model = Self::new(config, 0)?;
        model.params.load(&ck.tensors, "")?;
        model.tokenizer_digest = digest;
        Ok(model)
    }
}
