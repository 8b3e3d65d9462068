//! Motion feature extractor for the distribution metrics: a small temporal
//! convolutional autoencoder trained on real motions whose bottleneck,
//! averaged over time, is the feature vector.

use std::path::Path;

use candle_core::{Device, Module, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{FeatureSource, MotionFeatureSet};
use crate::nn::{to_flat, ParamStore};
use crate::pose_codec::{MotionSequence, NormStats};
use crate::rng::substream;
use crate::tokenizer::network::{MotionDecoder, MotionEncoder};
use crate::tokenizer::DOWNSAMPLE;
use crate::train::{Trainer, WarmupSchedule};

const FORMAT: &str = "reactgen/feature-extractor";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    /// Output feature width F.
    pub feature_dim: usize,
    pub width: usize,
    pub res_depth: usize,
    pub window_frames: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub warmup_iters: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            feature_dim: 64,
            width: 32,
            res_depth: 1,
            window_frames: 32,
            batch_size: 16,
            iterations: 600,
            learning_rate: 1e-3,
            warmup_iters: 20,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.width == 0 || self.batch_size == 0 || self.learning_rate <= 0.0 {
            return Err(Error::Config(
                "extractor: feature_dim, width, batch_size and learning_rate must be positive".into(),
            ));
        }
        if self.window_frames < DOWNSAMPLE || self.window_frames % DOWNSAMPLE != 0 {
            return Err(Error::Config("extractor: window_frames must be a positive multiple of 4".into()));
        }
        Ok(())
    }
}

pub struct FeatureExtractor {
    config: ExtractorConfig,
    motion_dim: usize,
    params: ParamStore,
    encoder: MotionEncoder,
    decoder: MotionDecoder,
    norm: NormStats,
}

fn to_tensor(motions: &[MotionSequence], device: &Device) -> Result<Tensor> {
    let (n, d) = (motions[0].frames(), motions[0].dim());
    let data: Vec<f32> = motions.iter().flat_map(|m| m.data().iter().copied()).collect();
    Ok(Tensor::from_vec(data, (motions.len(), n, d), device)?
        .transpose(1, 2)?
        .contiguous()?)
}

impl FeatureExtractor {
    pub fn new(config: ExtractorConfig, norm: NormStats, seed: u64) -> Result<Self> {
        config.validate()?;
        norm.validate()?;
        let motion_dim = norm.dim();
        let mut params = ParamStore::new(seed, "extractor-init");
        let encoder = MotionEncoder::new(&mut params, motion_dim, config.width, config.feature_dim, config.res_depth)?;
        let decoder = MotionDecoder::new(&mut params, config.feature_dim, config.width, motion_dim, config.res_depth, false)?;
        Ok(FeatureExtractor {
            config,
            motion_dim,
            params,
            encoder,
            decoder,
            norm,
        })
    }

    /// Trains on real motions with reconstruction MSE over random windows.
    pub fn fit(config: ExtractorConfig, motions: &[MotionSequence], seed: u64) -> Result<Self> {
        let norm = NormStats::compute(motions)?;
        let ex = FeatureExtractor::new(config, norm, seed)?;
        let normalized: Vec<MotionSequence> = motions.iter().map(|m| ex.norm.normalize(m)).collect::<Result<_>>()?;
        let shortest = normalized.iter().map(|m| m.frames()).min().unwrap_or(0);
        let window = ex.config.window_frames.min(shortest / DOWNSAMPLE * DOWNSAMPLE);
        if window < DOWNSAMPLE {
            return Err(Error::invalid("extractor training motions are shorter than 4 frames"));
        }
        let mut trainer = Trainer::new(
            ex.params.vars(),
            WarmupSchedule {
                peak: ex.config.learning_rate,
                warmup_iters: ex.config.warmup_iters,
            },
            0.0,
        )?;
        let mut rng = substream(seed, "extractor-windows");
        for it in 1..=ex.config.iterations {
            let batch: Vec<MotionSequence> = (0..ex.config.batch_size)
                .map(|_| {
                    let m = &normalized[rng.random_range(0..normalized.len())];
                    m.window(rng.random_range(0..=m.frames() - window), window)
                })
                .collect::<Result<_>>()?;
            let x = to_tensor(&batch, ex.device())?;
            let recon = ex.decoder.forward(&ex.encoder.forward(&x)?)?;
            let loss = (recon - &x)?.sqr()?.mean_all()?;
            let value = trainer.step(&loss, "feature extractor")?;
            if it % 100 == 0 {
                log::info!("extractor iteration {it}: reconstruction mse {value:.5}");
            }
        }
        Ok(ex)
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn device(&self) -> &Device {
        self.params.device()
    }

    /// Time-averaged bottleneck of one denormalized motion.
    pub fn extract(&self, motion: &MotionSequence) -> Result<Vec<f32>> {
        if motion.frames() < DOWNSAMPLE {
            return Err(Error::invalid(format!(
                "cannot extract features from a motion of {} frames",
                motion.frames()
            )));
        }
        if motion.dim() != self.motion_dim {
            return Err(Error::Shape {
                what: "motion feature width".into(),
                expected: self.motion_dim,
                found: motion.dim(),
            });
        }
        let x = to_tensor(&[self.norm.normalize(motion)?], self.device())?;
        to_flat(&self.encoder.forward(&x)?.mean(2)?)
    }

    pub fn extract_set(&self, motions: &[MotionSequence], source: FeatureSource) -> Result<MotionFeatureSet> {
        let rows: Vec<Vec<f32>> = motions.iter().map(|m| self.extract(m)).collect::<Result<_>>()?;
        if rows.is_empty() {
            return Err(Error::invalid("no motions to extract features from"));
        }
        MotionFeatureSet::from_vectors(&rows, source)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new(FORMAT);
        ck.tensors = self.params.tensors();
        ck.insert_json("config", &self.config)?;
        ck.insert_json("norm_stats", &self.norm)?;
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path, FORMAT, "evaluate")?;
        let ex = FeatureExtractor::new(ck.json("config")?, ck.json("norm_stats")?, 0)?;
        ex.params.load(&ck.tensors, "")?;
        Ok(ex)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn motion(frames: usize, phase: f32) -> MotionSequence {
        let d = 7;
        let data = (0..frames * d)
            .map(|i| ((i / d) as f32 * 0.3 + phase + (i % d) as f32).sin())
            .collect();
        MotionSequence::new(frames, d, data).unwrap()
    }

    fn small() -> ExtractorConfig {
        ExtractorConfig {
            feature_dim: 8,
            width: 8,
            window_frames: 16,
            batch_size: 2,
            iterations: 3,
            ..ExtractorConfig::default()
        }
    }

    #[test]
    fn features_are_deterministic_with_configured_width() {
        let ms = [motion(20, 0.0), motion(24, 1.0)];
        let ex = FeatureExtractor::fit(small(), &ms, 1).unwrap();
        let a = ex.extract(&ms[0]).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(a, ex.extract(&ms[0]).unwrap());
        assert_eq!(ex.extract_set(&ms, FeatureSource::Real).unwrap().count(), 2);
        assert!(ex.extract(&motion(3, 0.0)).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ms = [motion(20, 0.0), motion(24, 1.0)];
        let ex = FeatureExtractor::fit(small(), &ms, 2).unwrap();
        let path = dir.path().join("ex.safetensors");
        ex.save(&path).unwrap();
        let back = FeatureExtractor::load(&path).unwrap();
        assert_eq!(back.extract(&ms[1]).unwrap(), ex.extract(&ms[1]).unwrap());
    }
}
