//! Frame-level visual representations and the providers that supply them.
//!
//! The video encoder itself lives outside this crate; features arrive either
//! from precomputed files or from [`SyntheticProvider`].

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats;
use crate::rng::{substream_indexed, Rng};

pub const DEFAULT_FRAMES: usize = 16;
pub const DEFAULT_DIM: usize = 512;

/// Local per-frame representations, row-major `frames x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    frames: usize,
    dim: usize,
    data: Vec<f32>,
    source_id: String,
}

impl FrameFeatures {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>, source_id: String) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::invalid("frame features need at least one frame and one channel"));
        }
        if data.len() != frames * dim {
            return Err(Error::Shape {
                what: "frame feature buffer".into(),
                expected: frames * dim,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("frame features contain NaN or Inf"));
        }
        Ok(FrameFeatures {
            frames,
            dim,
            data,
            source_id,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    /// Reorders frames; `order[i]` is the source row placed at position `i`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.frames {
            return Err(Error::Shape {
                what: "frame permutation".into(),
                expected: self.frames,
                found: order.len(),
            });
        }
        let data = order.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        FrameFeatures::new(self.frames, self.dim, data, self.source_id.clone())
    }
}

/// Frame-averaged global representation.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalFeature {
    pub vector: Vec<f32>,
}

pub fn global_pool(features: &FrameFeatures) -> Result<GlobalFeature> {
    if features.frames == 0 {
        return Err(Error::invalid("cannot pool zero frames"));
    }
    let mut acc = vec![0.0f64; features.dim];
    for t in 0..features.frames {
        for (a, &v) in acc.iter_mut().zip(features.row(t)) {
            *a += v as f64;
        }
    }
    let n = features.frames as f64;
    Ok(GlobalFeature {
        vector: acc.into_iter().map(|a| (a / n) as f32).collect(),
    })
}

impl GlobalFeature {
    /// Builds the pooled vector and checks it against the provided one.
    pub fn checked(features: &FrameFeatures, vector: Vec<f32>) -> Result<Self> {
        let pooled = global_pool(features)?;
        if vector.len() != pooled.vector.len() {
            return Err(Error::Shape {
                what: "global feature".into(),
                expected: pooled.vector.len(),
                found: vector.len(),
            });
        }
        let ok = vector
            .iter()
            .zip(&pooled.vector)
            .all(|(a, b)| (a - b).abs() <= 1e-5 * (1.0 + b.abs()));
        if !ok {
            return Err(Error::invalid("global feature is not the frame mean"));
        }
        Ok(GlobalFeature { vector })
    }
}

/// Yields the frame features of a video by identifier.
pub trait FeatureProvider: Send + Sync {
    fn fetch(&self, id: &str) -> Result<FrameFeatures>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticFeatureConfig {
    pub frames: usize,
    pub dim: usize,
    /// Spread of every frame around its mode.
    pub sigma: f32,
    /// Scale of the per-category mode vectors.
    pub mean_scale: f32,
    pub min_key_frames: usize,
    pub max_key_frames: usize,
    /// Fixes the category modes for a whole corpus.
    pub corpus_seed: u64,
}

impl Default for SyntheticFeatureConfig {
    fn default() -> Self {
        SyntheticFeatureConfig {
            frames: DEFAULT_FRAMES,
            dim: DEFAULT_DIM,
            sigma: 0.1,
            mean_scale: 1.0,
            min_key_frames: 2,
            max_key_frames: 4,
            corpus_seed: 0,
        }
    }
}

/// Stand-in for a frozen video encoder. Each category owns a base mode and a
/// paired key-frame mode; a sample is mostly base frames plus a few key
/// frames at seeded positions.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    config: SyntheticFeatureConfig,
    n_categories: usize,
    base_modes: Vec<Vec<f32>>,
    key_modes: Vec<Vec<f32>>,
}

impl SyntheticProvider {
    pub fn new(config: SyntheticFeatureConfig, n_categories: usize) -> Result<Self> {
        if n_categories == 0 || config.frames == 0 || config.dim == 0 {
            return Err(Error::invalid("synthetic provider needs categories, frames and channels"));
        }
        if config.min_key_frames > config.max_key_frames || config.max_key_frames > config.frames {
            return Err(Error::invalid("key-frame range must fit inside the frame count"));
        }
        if !(config.sigma >= 0.0) {
            return Err(Error::invalid("sigma must be non-negative"));
        }
        let mode = |name: &str, c: usize| -> Vec<f32> {
            let mut rng = substream_indexed(config.corpus_seed, name, c as u64);
            (0..config.dim)
                .map(|_| config.mean_scale * { let s: f32 = StandardNormal.sample(&mut rng); s })
                .collect()
        };
        let base_modes = (0..n_categories).map(|c| mode("feature-base-mode", c)).collect();
        let key_modes = (0..n_categories).map(|c| mode("feature-key-mode", c)).collect();
        Ok(SyntheticProvider {
            config,
            n_categories,
            base_modes,
            key_modes,
        })
    }

    pub fn config(&self) -> &SyntheticFeatureConfig {
        &self.config
    }

    pub fn category_mean(&self, category: usize) -> &[f32] {
        &self.base_modes[category]
    }

    pub fn generate(&self, seed: u64, category: usize) -> Result<FrameFeatures> {
        if category >= self.n_categories {
            return Err(Error::invalid(format!(
                "category {category} outside [0, {})",
                self.n_categories
            )));
        }
        let cfg = &self.config;
        let mut rng: Rng = substream_indexed(
            cfg.corpus_seed ^ seed.rotate_left(17),
            "feature-sample",
            category as u64,
        );
        let n_keys = rng.random_range(cfg.min_key_frames..=cfg.max_key_frames);
        let keys: HashSet<usize> = sample(&mut rng, cfg.frames, n_keys).into_iter().collect();
        let mut data = Vec::with_capacity(cfg.frames * cfg.dim);
        for t in 0..cfg.frames {
            let mode = if keys.contains(&t) {
                &self.key_modes[category]
            } else {
                &self.base_modes[category]
            };
            for &m in mode {
                let eps: f32 = StandardNormal.sample(&mut rng);
                data.push(m + cfg.sigma * eps);
            }
        }
        FrameFeatures::new(cfg.frames, cfg.dim, data, format!("synth:{seed}:{category}"))
    }
}

impl FeatureProvider for SyntheticProvider {
    /// Identifiers have the form `synth:<seed>:<category>`.
    fn fetch(&self, id: &str) -> Result<FrameFeatures> {
        let parse = || -> Option<(u64, usize)> {
            let mut it = id.strip_prefix("synth:")?.split(':');
            let seed = it.next()?.parse().ok()?;
            let cat = it.next()?.parse().ok()?;
            it.next().is_none().then_some((seed, cat))
        };
        let (seed, cat) = parse()
            .ok_or_else(|| Error::invalid(format!("malformed synthetic feature id {id:?}")))?;
        self.generate(seed, cat)
    }
}

/// Reads feature files from a directory; identifiers are relative paths.
#[derive(Debug, Clone)]
pub struct PrecomputedProvider {
    root: PathBuf,
    expected: Option<(usize, usize)>,
}

impl PrecomputedProvider {
    pub fn new(root: impl Into<PathBuf>, expected: Option<(usize, usize)>) -> Self {
        PrecomputedProvider {
            root: root.into(),
            expected,
        }
    }
}

impl FeatureProvider for PrecomputedProvider {
    fn fetch(&self, id: &str) -> Result<FrameFeatures> {
        load_precomputed(&self.root.join(id), self.expected)
    }
}

/// Loads a feature file, optionally checking its `(frames, dim)` shape.
pub fn load_precomputed(path: &Path, expected: Option<(usize, usize)>) -> Result<FrameFeatures> {
    let f = formats::read_features(path)?;
    if let Some((frames, dim)) = expected {
        if f.frames() != frames {
            return Err(Error::Shape {
                what: format!("frame count of {}", path.display()),
                expected: frames,
                found: f.frames(),
            });
        }
        if f.dim() != dim {
            return Err(Error::Shape {
                what: format!("feature width of {}", path.display()),
                expected: dim,
                found: f.dim(),
            });
        }
    }
    Ok(f)
}
