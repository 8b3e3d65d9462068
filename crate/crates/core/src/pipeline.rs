//! Pipeline stages over a work directory.
//!
//! ```text
//! work/
//!   data/manifest.jsonl  data/split.jsonl  data/unseen.jsonl
//!   data/features/*.rgvf data/motions/*.rgmo
//!   checkpoints/{tokenizer,base,residual,extractor}.safetensors
//!   logs/<stage>.csv
//!   reports/evaluation.json  reports/evaluation.txt
//! ```
//!
//! Each stage refuses to replace its outputs unless forced, and reads its
//! inputs from the previous stage's outputs.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::file_digest;
use crate::config::RunConfig;
use crate::dataset::{resolve, seen_unseen_split, split_manifest, synth_corpus, PairEntry, PairManifest, Split};
use crate::error::{Error, Result};
use crate::formats::{read_features, read_motion, write_motion};
use crate::metrics::{evaluate_protocol, FeatureExtractor, ProtocolConfig, ProtocolReport, ReactionSource};
use crate::pose_codec::{MotionSequence, NormStats};
use crate::reaction::training::{base_train_step, residual_train_step, TokenExample};
use crate::reaction::{generate_reaction, GenerationConfig, MaskedTransformer, ModelConfig, ResidualTransformer, TransformerConfig};
use crate::rng::{derive_seed, substream, substream_indexed};
use crate::tokenizer::{MotionTokenizer, MotionTokens, TokenizerConfig, DOWNSAMPLE};
use crate::video_features::FrameFeatures;

/// File layout of one run.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn manifest(&self) -> PathBuf {
        self.data_dir().join("manifest.jsonl")
    }
    pub fn split(&self) -> PathBuf {
        self.data_dir().join("split.jsonl")
    }
    pub fn unseen(&self) -> PathBuf {
        self.data_dir().join("unseen.jsonl")
    }
    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.safetensors"))
    }
    pub fn tokenizer(&self) -> PathBuf {
        self.checkpoint("tokenizer")
    }
    pub fn base(&self) -> PathBuf {
        self.checkpoint("base")
    }
    pub fn residual(&self) -> PathBuf {
        self.checkpoint("residual")
    }
    pub fn extractor(&self) -> PathBuf {
        self.checkpoint("extractor")
    }
    pub fn log(&self, stage: &str) -> PathBuf {
        self.root.join("logs").join(format!("{stage}.csv"))
    }
    pub fn report_json(&self) -> PathBuf {
        self.root.join("reports").join("evaluation.json")
    }
    pub fn report_table(&self) -> PathBuf {
        self.root.join("reports").join("evaluation.txt")
    }
}

fn guard(outputs: &[PathBuf], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    match outputs.iter().find(|p| p.exists()) {
        Some(p) => Err(Error::OutputExists(p.clone())),
        None => Ok(()),
    }
}

fn require(path: &Path, stage: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingCheckpoint {
            path: path.to_path_buf(),
            stage,
        })
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// CSV training log, flushed per row.
struct StageLog {
    file: Option<(PathBuf, fs::File)>,
}

impl StageLog {
    fn create(path: Option<PathBuf>, header: &str) -> Result<Self> {
        let Some(path) = path else { return Ok(StageLog { file: None }) };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{header}").map_err(|e| Error::io(&path, e))?;
        Ok(StageLog { file: Some((path, f)) })
    }

    fn row(&mut self, line: String) -> Result<()> {
        if let Some((path, f)) = &mut self.file {
            writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }
}

/// One manifest entry with its data loaded.
#[derive(Debug, Clone)]
pub struct LoadedPair {
    pub entry: PairEntry,
    pub features: FrameFeatures,
    pub motion: MotionSequence,
}

pub fn load_pairs(data_dir: &Path, manifest: &PairManifest) -> Result<Vec<LoadedPair>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            Ok(LoadedPair {
                entry: e.clone(),
                features: read_features(&resolve(data_dir, &e.feature_path))?,
                motion: read_motion(&resolve(data_dir, &e.motion_path))?,
            })
        })
        .collect()
}

fn read_split(ws: &Workspace, split: Split) -> Result<Vec<LoadedPair>> {
    require(&ws.split(), "split")?;
    let part = PairManifest::read(&ws.split())?.with_split(split);
    if part.is_empty() {
        return Err(Error::invalid(format!("the {split:?} split is empty")));
    }
    load_pairs(&ws.data_dir(), &part)
}

pub fn synth_data(cfg: &RunConfig, ws: &Workspace, force: bool) -> Result<PairManifest> {
    guard(&[ws.manifest()], force)?;
    let manifest = synth_corpus(&cfg.data, cfg.seed, &ws.data_dir())?;
    log::info!("wrote {} pairs to {}", manifest.len(), ws.data_dir().display());
    Ok(manifest)
}

pub fn split(cfg: &RunConfig, ws: &Workspace, force: bool) -> Result<PairManifest> {
    guard(&[ws.split(), ws.unseen()], force)?;
    require(&ws.manifest(), "synth-data")?;
    let manifest = PairManifest::read(&ws.manifest())?;
    let held: Vec<&str> = cfg.split.held_out.iter().map(String::as_str).collect();
    let (seen, unseen) = seen_unseen_split(&manifest, &held)?;
    let out = split_manifest(&seen, cfg.split.train_fraction, cfg.seed)?;
    out.write(&ws.split())?;
    if !unseen.is_empty() {
        unseen.write(&ws.unseen())?;
    }
    log::info!(
        "split {} pairs into {} train / {} test ({} unseen)",
        seen.len(),
        out.with_split(Split::Train).len(),
        out.with_split(Split::Test).len(),
        unseen.len()
    );
    Ok(out)
}

/// Summary of a finished training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub final_loss: f32,
}

fn iterations(epochs: usize, items: usize, batch: usize) -> usize {
    epochs * items.div_ceil(batch)
}

/// Trains a tokenizer on normalized motions. One epoch draws one random
/// window from every motion.
pub fn fit_tokenizer(
    config: &TokenizerConfig,
    normalized: &[MotionSequence],
    seed: u64,
    log_path: Option<PathBuf>,
) -> Result<(MotionTokenizer, TrainSummary)> {
    let dim = normalized
        .first()
        .ok_or_else(|| Error::invalid("no motions to train the tokenizer on"))?
        .dim();
    let window = config.window_frames;
    if let Some(m) = normalized.iter().find(|m| m.frames() < window) {
        return Err(Error::invalid(format!(
            "motion of {} frames is shorter than the {window}-frame training window",
            m.frames()
        )));
    }
    let mut tok = MotionTokenizer::new(config.clone(), dim, derive_seed(seed, "tokenizer-init", 0))?;
    let mut trainer = tok.trainer()?;
    let mut rng = substream(seed, "tokenizer-train");
    let mut log = StageLog::create(log_path, "iteration,total,reconstruction,commitment,usage")?;
    let mut last = f32::NAN;
    let mut order: Vec<usize> = (0..normalized.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<MotionSequence> = chunk
                .iter()
                .map(|&i| {
                    let m = &normalized[i];
                    m.window(rng.random_range(0..=m.frames() - window), window)
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&MotionSequence> = batch.iter().collect();
            let terms = tok.train_step(&refs, &mut trainer, &mut rng)?;
            last = terms.total;
            let it = trainer.iteration();
            log.row(format!(
                "{it},{},{},{},{}",
                terms.total,
                terms.reconstruction,
                terms.commitment_term,
                tok.codebook_usage(0)
            ))?;
            if it % 100 == 0 {
                log::info!("tokenizer iteration {it}: loss {:.5}", terms.total);
            }
        }
    }
    let summary = TrainSummary {
        iterations: trainer.iteration(),
        final_loss: last,
    };
    Ok((tok, summary))
}

pub fn train_tokenizer(cfg: &RunConfig, ws: &Workspace, force: bool) -> Result<TrainSummary> {
    guard(&[ws.tokenizer()], force)?;
    let pairs = read_split(ws, Split::Train)?;
    let motions: Vec<MotionSequence> = pairs.into_iter().map(|p| p.motion).collect();
    let stats = NormStats::compute(&motions)?;
    let normalized: Vec<MotionSequence> = motions.iter().map(|m| stats.normalize(m)).collect::<Result<_>>()?;
    let (mut tok, summary) = fit_tokenizer(&cfg.tokenizer, &normalized, cfg.seed, Some(ws.log("train-tokenizer")))?;
    tok.set_norm_stats(stats)?;
    tok.save(&ws.tokenizer())?;
    Ok(summary)
}

/// Tokenizes pairs through a frozen tokenizer carrying its statistics.
pub fn token_examples(tokenizer: &MotionTokenizer, pairs: &[LoadedPair]) -> Result<Vec<TokenExample>> {
    let stats = tokenizer
        .norm_stats()
        .ok_or_else(|| Error::invalid("tokenizer carries no normalization statistics"))?;
    pairs
        .iter()
        .map(|p| {
            Ok(TokenExample {
                features: p.features.clone(),
                tokens: tokenizer.tokenize(&stats.normalize(&p.motion)?)?,
            })
        })
        .collect()
}

pub fn base_model_config(t: &TransformerConfig, tokenizer: &MotionTokenizer, vision_dim: usize) -> ModelConfig {
    ModelConfig::resolve(t, tokenizer.config().codebook_size, vision_dim, 0, 0)
}

pub fn residual_model_config(t: &TransformerConfig, tokenizer: &MotionTokenizer, vision_dim: usize) -> ModelConfig {
    let tc = tokenizer.config();
    ModelConfig::resolve(t, tc.codebook_size, vision_dim, tc.residual_layers, tc.code_dim)
}

fn epoch_batches<'a>(examples: &'a [TokenExample], batch: usize, seed: u64, name: &str, epoch: usize) -> Vec<Vec<&'a TokenExample>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut substream_indexed(seed, name, epoch as u64));
    order
        .chunks(batch)
        .map(|c| c.iter().map(|&i| &examples[i]).collect())
        .collect()
}

pub fn fit_base(
    t: &TransformerConfig,
    model_cfg: ModelConfig,
    examples: &[TokenExample],
    seed: u64,
    log_path: Option<PathBuf>,
) -> Result<(MaskedTransformer, TrainSummary)> {
    if examples.is_empty() {
        return Err(Error::invalid("no examples to train the base transformer on"));
    }
    let model = MaskedTransformer::new(model_cfg, derive_seed(seed, "base-init", 0))?;
    let mut trainer = model.trainer(t.learning_rate, t.warmup_iters, t.weight_decay)?;
    let mut rng = substream(seed, "base-train");
    let mut log = StageLog::create(log_path, "iteration,loss")?;
    let mut last = f32::NAN;
    for epoch in 0..t.base_epochs {
        for batch in epoch_batches(examples, t.batch_size, seed, "base-epoch", epoch) {
            last = base_train_step(&model, &mut trainer, &batch, &mut rng)?;
            let it = trainer.iteration();
            log.row(format!("{it},{last}"))?;
            if it % 100 == 0 {
                log::info!("base iteration {it}: loss {last:.5}");
            }
        }
    }
    let summary = TrainSummary {
        iterations: trainer.iteration(),
        final_loss: last,
    };
    debug_assert_eq!(summary.iterations, iterations(t.base_epochs, examples.len(), t.batch_size));
    Ok((model, summary))
}

pub fn fit_residual(
    t: &TransformerConfig,
    model_cfg: ModelConfig,
    examples: &[TokenExample],
    tokenizer: &MotionTokenizer,
    seed: u64,
    log_path: Option<PathBuf>,
) -> Result<(ResidualTransformer, TrainSummary)> {
    if examples.is_empty() {
        return Err(Error::invalid("no examples to train the residual transformer on"));
    }
    let model = ResidualTransformer::new(model_cfg, derive_seed(seed, "residual-init", 0))?;
    let mut trainer = model.trainer(t.learning_rate, t.warmup_iters, t.weight_decay)?;
    let mut rng = substream(seed, "residual-train");
    let mut log = StageLog::create(log_path, "iteration,loss")?;
    let mut last = f32::NAN;
    for epoch in 0..t.residual_epochs {
        for batch in epoch_batches(examples, t.batch_size, seed, "residual-epoch", epoch) {
            last = residual_train_step(&model, &mut trainer, &batch, tokenizer.codebooks(), &mut rng)?;
            let it = trainer.iteration();
            log.row(format!("{it},{last}"))?;
            if it % 100 == 0 {
                log::info!("residual iteration {it}: loss {last:.5}");
            }
        }
    }
    Ok((
        model,
        TrainSummary {
            iterations: trainer.iteration(),
            final_loss: last,
        },
    ))
}

/// Frozen tokenizer plus the digest downstream checkpoints are tied to.
fn load_tokenizer(ws: &Workspace) -> Result<(MotionTokenizer, String)> {
    let path = ws.tokenizer();
    let tok = MotionTokenizer::load(&path)?;
    Ok((tok, file_digest(&path)?))
}

fn vision_dim(pairs: &[LoadedPair]) -> usize {
    pairs[0].features.dim()
}

pub fn train_base(cfg: &RunConfig, ws: &Workspace, force: bool) -> Result<TrainSummary> {
    guard(&[ws.base()], force)?;
    let (tok, digest) = load_tokenizer(ws)?;
    let pairs = read_split(ws, Split::Train)?;
    let examples = token_examples(&tok, &pairs)?;
    let mc = base_model_config(&cfg.transformer, &tok, vision_dim(&pairs));
    let (mut model, summary) = fit_base(&cfg.transformer, mc, &examples, cfg.seed, Some(ws.log("train-base")))?;
    model.set_tokenizer_digest(digest);
    model.save(&ws.base())?;
    Ok(summary)
}

pub fn train_residual(cfg: &RunConfig, ws: &Workspace, force: bool) -> Result<TrainSummary> {
    guard(&[ws.residual()], force)?;
    let (tok, digest) = load_tokenizer(ws)?;
    if tok.config().residual_layers == 0 {
        return Err(Error::Config("tokenizer has no residual layers to train".into()));
    }
    let pairs = read_split(ws, Split::Train)?;
    let examples = token_examples(&tok, &pairs)?;
    let mc = residual_model_config(&cfg.transformer, &tok, vision_dim(&pairs));
    let (mut model, summary) = fit_residual(&cfg.transformer, mc, &examples, &tok, cfg.seed, Some(ws.log("train-residual")))?;
    model.set_tokenizer_digest(digest);
    model.save(&ws.residual())?;
    Ok(summary)
}

/// Every trained model needed to turn video features into motion.
pub struct ReactionModels {
    pub tokenizer: MotionTokenizer,
    pub base: MaskedTransformer,
    pub residual: Option<ResidualTransformer>,
}

impl ReactionModels {
    pub fn load(ws: &Workspace) -> Result<Self> {
        let (tokenizer, digest) = load_tokenizer(ws)?;
        let base = MaskedTransformer::load(&ws.base(), Some(&digest))?;
        let residual = if tokenizer.config().residual_layers > 0 {
            Some(ResidualTransformer::load(&ws.residual(), Some(&digest))?)
        } else {
            None
        };
        Ok(ReactionModels {
            tokenizer,
            base,
            residual,
        })
    }

    pub fn generate(&self, features: &FrameFeatures, gen: &GenerationConfig) -> Result<MotionSequence> {
        generate_reaction(features, gen, &self.base, self.residual.as_ref(), &self.tokenizer)
    }
}

/// Flags of the `generate` command.
#[derive(Debug, Clone)]
pub struct GenerateRequest {
    pub features: PathBuf,
    /// Output length in frames, a multiple of 4.
    pub frames: usize,
    pub iterations: Option<usize>,
    pub temperature: Option<f32>,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn generate(cfg: &RunConfig, ws: &Workspace, req: &GenerateRequest, force: bool) -> Result<MotionSequence> {
    guard(std::slice::from_ref(&req.out), force)?;
    if req.frames == 0 || req.frames % DOWNSAMPLE != 0 {
        return Err(Error::invalid(format!(
            "--length {} must be a positive multiple of {DOWNSAMPLE} frames",
            req.frames
        )));
    }
    let models = ReactionModels::load(ws)?;
    let features = read_features(&req.features)?;
    let gen = GenerationConfig {
        iterations: req.iterations.unwrap_or(cfg.decode.iterations),
        temperature: req.temperature.unwrap_or(cfg.decode.temperature),
        target_length: req.frames / DOWNSAMPLE,
        seed: req.seed,
    };
    let motion = models.generate(&features, &gen)?;
    write_motion(&req.out, &motion)?;
    Ok(motion)
}

/// Test videos decoded by the trained models at their ground-truth length.
pub struct ModelSource<'a> {
    pub models: &'a ReactionModels,
    pub cases: Vec<(FrameFeatures, usize)>,
    pub decode: GenerationConfig,
}

impl ReactionSource for ModelSource<'_> {
    fn cases(&self) -> usize {
        self.cases.len()
    }

    fn generate(&self, case: usize, seed: u64) -> Result<MotionSequence> {
        let (features, n) = &self.cases[case];
        let gen = GenerationConfig {
            target_length: *n,
            seed,
            ..self.decode.clone()
        };
        self.models.generate(features, &gen)
    }
}

/// Reference source: uniformly random tokens on every quantizer layer.
pub struct RandomTokenSource<'a> {
    pub tokenizer: &'a MotionTokenizer,
    pub lengths: Vec<usize>,
}

impl ReactionSource for RandomTokenSource<'_> {
    fn cases(&self) -> usize {
        self.lengths.len()
    }

    fn generate(&self, case: usize, seed: u64) -> Result<MotionSequence> {
        let k = self.tokenizer.config().codebook_size as u32;
        let n = self.lengths[case];
        let mut rng = substream(seed, "random-tokens");
        let tokens = MotionTokens {
            layers: (0..self.tokenizer.config().quantizer_depth())
                .map(|_| (0..n).map(|_| rng.random_range(0..k)).collect())
                .collect(),
        };
        let stats = self
            .tokenizer
            .norm_stats()
            .ok_or_else(|| Error::invalid("tokenizer carries no normalization statistics"))?;
        let mut m = stats.denormalize(&self.tokenizer.decode_tokens(&tokens)?)?;
        m.snap_contacts()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationOutcome {
    pub model: ProtocolReport,
    pub random_tokens: Option<ProtocolReport>,
}

impl EvaluationOutcome {
    pub fn to_table(&self) -> String {
        let mut out = self.model.to_table();
        if let Some(r) = &self.random_tokens {
            if let Some(f) = r.get("FID") {
                out += &format!(
                    "{:<10} {:>16}\n",
                    "Random",
                    format!("{:.3}±{:.3}", f.mean, f.ci95_halfwidth)
                );
            }
        }
        out
    }
}

/// Loads the extractor or fits it on the training motions.
pub fn prepare_extractor(cfg: &RunConfig, ws: &Workspace, train: &[LoadedPair], refit: bool) -> Result<FeatureExtractor> {
    let path = ws.extractor();
    if path.exists() && !refit {
        return FeatureExtractor::load(&path);
    }
    let motions: Vec<MotionSequence> = train.iter().map(|p| p.motion.clone()).collect();
    let ex = FeatureExtractor::fit(
        cfg.evaluation.extractor.clone(),
        &motions,
        derive_seed(cfg.seed, "extractor", 0),
    )?;
    ex.save(&path)?;
    Ok(ex)
}

/// Runs the protocol on the test split with already loaded models.
pub fn evaluate_models(
    cfg: &RunConfig,
    models: &ReactionModels,
    test: &[LoadedPair],
    extractor: &FeatureExtractor,
    protocol: &ProtocolConfig,
) -> Result<EvaluationOutcome> {
    let max_tokens = models.base.config().max_tokens;
    let lengths: Vec<usize> = test
        .iter()
        .map(|p| (p.motion.frames() / DOWNSAMPLE).clamp(1, max_tokens))
        .collect();
    let source = ModelSource {
        models,
        cases: test.iter().zip(&lengths).map(|(p, &n)| (p.features.clone(), n)).collect(),
        decode: GenerationConfig {
            iterations: cfg.decode.iterations,
            temperature: cfg.decode.temperature,
            ..GenerationConfig::default()
        },
    };
    let real: Vec<MotionSequence> = test.iter().map(|p| p.motion.clone()).collect();
    let model = evaluate_protocol(&real, &source, extractor, protocol)?;
    let random_tokens = if cfg.evaluation.random_baseline {
        let random = RandomTokenSource {
            tokenizer: &models.tokenizer,
            lengths,
        };
        Some(evaluate_protocol(&real, &random, extractor, protocol)?)
    } else {
        None
    };
    Ok(EvaluationOutcome { model, random_tokens })
}

pub fn evaluate(cfg: &RunConfig, ws: &Workspace, force: bool) -> Result<EvaluationOutcome> {
    guard(&[ws.report_json(), ws.report_table()], force)?;
    let models = ReactionModels::load(ws)?;
    let train = read_split(ws, Split::Train)?;
    let test = read_split(ws, Split::Test)?;
    let extractor = prepare_extractor(cfg, ws, &train, force)?;
    let outcome = evaluate_models(cfg, &models, &test, &extractor, &cfg.evaluation.protocol)?;
    write_text(&ws.report_json(), &serde_json::to_string_pretty(&outcome)?)?;
    write_text(&ws.report_table(), &outcome.to_table())?;
    Ok(outcome)
}
