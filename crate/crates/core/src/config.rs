//! Declarative run configuration.
//!
//! A run is described by one TOML file whose sections mirror the pipeline
//! stages. Every key is required and unknown keys are rejected, so a file
//! always states the full experiment. Only filesystem locations may be
//! overridden from the environment (`REACTGEN_WORK_DIR`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::SynthConfig;
use crate::error::{Error, Result};
use crate::metrics::{ExtractorConfig, ProtocolConfig};
use crate::reaction::TransformerConfig;
use crate::tokenizer::TokenizerConfig;

pub const WORK_DIR_ENV: &str = "REACTGEN_WORK_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Root for data, checkpoints, logs and reports; relative paths resolve
    /// against the current directory.
    pub work_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train_fraction: f64,
    /// Subcategories removed from both splits and written as the unseen set.
    pub held_out: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub iterations: usize,
    pub temperature: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub protocol: ProtocolConfig,
    pub extractor: ExtractorConfig,
    /// Also score decodes of uniformly random tokens as a reference.
    pub random_baseline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every stage derives named streams from it.
    pub seed: u64,
    pub paths: PathsConfig,
    pub data: SynthConfig,
    pub split: SplitConfig,
    pub tokenizer: TokenizerConfig,
    pub transformer: TransformerConfig,
    pub decode: DecodeConfig,
    pub evaluation: EvaluationConfig,
}

impl RunConfig {
    /// Laptop profile: trains end to end in minutes on one CPU core.
    pub fn toy() -> Self {
        RunConfig {
            seed: 0,
            paths: PathsConfig {
                work_dir: PathBuf::from("work"),
            },
            data: SynthConfig::toy(),
            split: SplitConfig {
                train_fraction: 0.8,
                held_out: Vec::new(),
            },
            tokenizer: TokenizerConfig::toy(),
            transformer: TransformerConfig::toy(),
            decode: DecodeConfig {
                iterations: 10,
                temperature: 1.0,
            },
            evaluation: EvaluationConfig {
                protocol: ProtocolConfig::default(),
                extractor: ExtractorConfig::default(),
                random_baseline: true,
            },
        }
    }

    /// Full-size architecture and schedules.
    pub fn full() -> Self {
        let mut c = RunConfig::toy();
        c.data = SynthConfig {
            pairs: 3200,
            categories: 32,
            min_frames: 64,
            max_frames: 196,
            feature_dim: 512,
            ..SynthConfig::toy()
        };
        c.tokenizer = TokenizerConfig::full();
        c.transformer = TransformerConfig::full();
        c.evaluation.random_baseline = false;
        c
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown profile {other:?}; expected toy or full"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies the path-only environment override.
    pub fn with_env_overrides(mut self) -> Self {
        if let Some(dir) = std::env::var_os(WORK_DIR_ENV) {
            self.paths.work_dir = PathBuf::from(dir);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.tokenizer.validate()?;
        self.evaluation.extractor.validate()?;
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split.train_fraction {} must lie strictly between 0 and 1",
                self.split.train_fraction
            )));
        }
        for name in &self.split.held_out {
            crate::dataset::subcategory_index(name).map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.decode.iterations == 0 || !(self.decode.temperature >= 0.0) {
            return Err(Error::Config(
                "decode.iterations must be positive and decode.temperature non-negative".into(),
            ));
        }
        if self.data.min_frames < self.tokenizer.window_frames {
            return Err(Error::Config(format!(
                "data.min_frames {} is shorter than tokenizer.window_frames {}",
                self.data.min_frames, self.tokenizer.window_frames
            )));
        }
        let longest_tokens = self.data.max_frames / crate::tokenizer::DOWNSAMPLE;
        if longest_tokens > self.transformer.max_tokens {
            return Err(Error::Config(format!(
                "motions of {} frames need {longest_tokens} tokens but transformer.max_tokens is {}",
                self.data.max_frames, self.transformer.max_tokens
            )));
        }
        let p = &self.evaluation.protocol;
        if p.repetitions == 0 || p.diversity_pairs == 0 || p.multimodality_pairs == 0 {
            return Err(Error::Config("evaluation counts must be positive".into()));
        }
        if p.multimodality_generations < crate::metrics::MULTIMODALITY_GENERATIONS {
            return Err(Error::Config(format!(
                "evaluation.protocol.multimodality_generations must be at least {}",
                crate::metrics::MULTIMODALITY_GENERATIONS
            )));
        }
        let t = &self.transformer;
        if t.heads == 0 || t.latent_dim % t.heads != 0 {
            return Err(Error::Config("transformer.latent_dim must be divisible by transformer.heads".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_round_trip_through_toml() {
        for c in [RunConfig::toy(), RunConfig::full()] {
            c.validate().unwrap();
            assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        }
    }

    #[test]
    fn shipped_files_match_profiles() {
        let toy = include_str!("../../../configs/toy.toml");
        assert_eq!(RunConfig::from_toml(toy).unwrap(), RunConfig::toy());
        let full = include_str!("../../../configs/full.toml");
        assert_eq!(RunConfig::from_toml(full).unwrap(), RunConfig::full());
    }

    #[test]
    fn toy_profile_dimensions() {
        let c = RunConfig::toy();
        assert_eq!(
            (c.data.pairs, c.data.feature_frames, c.data.feature_dim),
            (96, 16, 8)
        );
        assert_eq!((c.tokenizer.codebook_size, c.tokenizer.residual_layers), (32, 2));
        assert_eq!((c.transformer.latent_dim, c.transformer.layers), (64, 2));
    }

    #[test]
    fn unknown_and_missing_keys_are_rejected() {
        let text = RunConfig::toy().to_toml().unwrap();
        let extra = text.replacen("seed = 0", "seed = 0\nbogus = 1", 1);
        assert!(matches!(RunConfig::from_toml(&extra), Err(Error::Config(_))));
        let missing = text.replacen("seed = 0\n", "", 1);
        assert!(matches!(RunConfig::from_toml(&missing), Err(Error::Config(_))));
    }

    #[test]
    fn semantic_validation() {
        let mut c = RunConfig::toy();
        c.split.held_out = vec!["no-such-category".into()];
        assert!(c.validate().is_err());
        let mut c = RunConfig::toy();
        c.transformer.max_tokens = c.data.max_frames / 4 - 1;
        assert!(c.validate().is_err());
        assert!(RunConfig::profile("huge").is_err());
    }
}
