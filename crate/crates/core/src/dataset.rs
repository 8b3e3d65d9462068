//! Pair manifests, per-subcategory splitting and the synthetic corpus.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{write_features, write_motion};
use crate::pose_codec::{encode_pose_sequence, ContactThresholds, JointSequence, MotionSequence, Skeleton, MOTION_FPS};
use crate::rng::{derive_seed, substream_indexed, Rng};
use crate::video_features::{SyntheticFeatureConfig, SyntheticProvider};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BroadCategory {
    HumanHuman,
    AnimalHuman,
    SceneHuman,
}

impl BroadCategory {
    pub fn name(self) -> &'static str {
        match self {
            BroadCategory::HumanHuman => "human-human",
            BroadCategory::AnimalHuman => "animal-human",
            BroadCategory::SceneHuman => "scene-human",
        }
    }
}

/// The 32 interaction subcategories: 16 human-human, 8 animal-human and
/// 8 scene-human.
pub const SUBCATEGORIES: [&str; 32] = [
    "handshake",
    "hug",
    "high-five",
    "push",
    "punch",
    "kick",
    "wave-back",
    "partner-dance",
    "hand-over",
    "bow",
    "chase",
    "dodge",
    "tackle",
    "pull",
    "point-at",
    "applaud",
    "dog-jump",
    "dog-fetch",
    "cat-approach",
    "bird-swoop",
    "horse-charge",
    "snake-strike",
    "bear-rise",
    "bull-charge",
    "rain-start",
    "falling-object",
    "door-slam",
    "car-approach",
    "fire-burst",
    "wind-gust",
    "ball-thrown",
    "ground-shake",
];

pub fn subcategory_index(name: &str) -> Result<usize> {
    SUBCATEGORIES
        .iter()
        .position(|&s| s == name)
        .ok_or_else(|| Error::invalid(format!("unknown subcategory {name:?}")))
}

pub fn broad_category_of(index: usize) -> BroadCategory {
    match index {
        0..=15 => BroadCategory::HumanHuman,
        16..=23 => BroadCategory::AnimalHuman,
        _ => BroadCategory::SceneHuman,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub pair_id: String,
    /// Relative to the manifest's directory.
    pub feature_path: String,
    pub motion_path: String,
    pub broad_category: BroadCategory,
    pub subcategory: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl PairEntry {
    pub fn subcategory_index(&self) -> Result<usize> {
        subcategory_index(&self.subcategory)
    }
}

/// JSON-lines list of video-motion pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairManifest {
    pub entries: Vec<PairEntry>,
}

impl PairManifest {
    /// Checks subcategory names, their broad category and unique ids.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for e in &self.entries {
            let idx = e.subcategory_index()?;
            if broad_category_of(idx) != e.broad_category {
                return Err(Error::invalid(format!(
                    "pair {}: subcategory {} belongs to {}, not {}",
                    e.pair_id,
                    e.subcategory,
                    broad_category_of(idx).name(),
                    e.broad_category.name()
                )));
            }
            if !ids.insert(e.pair_id.as_str()) {
                return Err(Error::invalid(format!("duplicate pair id {}", e.pair_id)));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: PairEntry = serde_json::from_str(line)
                .map_err(|err| Error::invalid(format!("manifest line {}: {err}", i + 1)))?;
            entries.push(e);
        }
        let m = PairManifest { entries };
        m.validate()?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        for line in BufReader::new(file).lines() {
            text.push_str(&line.map_err(|e| Error::io(path, e))?);
            text.push('\n');
        }
        Self::from_jsonl(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn with_split(&self, split: Split) -> PairManifest {
        PairManifest {
            entries: self
                .entries
                .iter()
                .filter(|e| e.split == Some(split))
                .cloned()
                .collect(),
        }
    }

    /// Entries grouped by subcategory name, in manifest order.
    pub fn by_subcategory(&self) -> BTreeMap<&str, Vec<&PairEntry>> {
        let mut out: BTreeMap<&str, Vec<&PairEntry>> = BTreeMap::new();
        for e in &self.entries {
            out.entry(e.subcategory.as_str()).or_default().push(e);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Resolves an entry path against the manifest directory.
pub fn resolve(root: &Path, relative: &str) -> PathBuf {
    root.join(relative)
}

/// Shuffles each subcategory with its own stream and sends
/// `round(train_fraction * count)` entries to train, the rest to test.
pub fn split_manifest(manifest: &PairManifest, train_fraction: f64, seed: u64) -> Result<PairManifest> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::invalid(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    manifest.validate()?;
    let mut out = manifest.clone();
    let groups: BTreeMap<String, Vec<usize>> = {
        let mut g: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, e) in manifest.entries.iter().enumerate() {
            g.entry(e.subcategory.clone()).or_default().push(i);
        }
        g
    };
    for (name, mut idx) in groups {
        if idx.len() < 5 {
            log::warn!(
                "subcategory {name} has only {} pairs; its split ratio is approximate",
                idx.len()
            );
        }
        let mut rng = substream_indexed(seed, "split", subcategory_index(&name)? as u64);
        idx.shuffle(&mut rng);
        let n_train = (train_fraction * idx.len() as f64).round() as usize;
        for (k, &i) in idx.iter().enumerate() {
            out.entries[i].split = Some(if k < n_train { Split::Train } else { Split::Test });
        }
    }
    Ok(out)
}

/// Partitions by membership of the held-out subcategories.
pub fn seen_unseen_split(manifest: &PairManifest, held_out: &[&str]) -> Result<(PairManifest, PairManifest)> {
    for name in held_out {
        subcategory_index(name)?;
    }
    let (unseen, seen): (Vec<PairEntry>, Vec<PairEntry>) = manifest
        .entries
        .iter()
        .cloned()
        .partition(|e| held_out.contains(&e.subcategory.as_str()));
    Ok((PairManifest { entries: seen }, PairManifest { entries: unseen }))
}

/// Knobs of the synthetic video-motion corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub pairs: usize,
    /// Number of subcategories used, spread evenly over the 32.
    pub categories: usize,
    /// Motion lengths in frames are drawn from this inclusive range, in
    /// steps of 4.
    pub min_frames: usize,
    pub max_frames: usize,
    pub feature_frames: usize,
    pub feature_dim: usize,
    pub feature_sigma: f32,
    /// Relative per-pair jitter of the motion parameters.
    pub jitter: f64,
}

impl SynthConfig {
    pub fn toy() -> Self {
        SynthConfig {
            pairs: 96,
            categories: 8,
            min_frames: 40,
            max_frames: 64,
            feature_frames: 16,
            feature_dim: 8,
            feature_sigma: 0.1,
            jitter: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories == 0 || self.categories > SUBCATEGORIES.len() {
            return Err(Error::Config(format!("synth categories {} outside [1, 32]", self.categories)));
        }
        if self.pairs == 0 {
            return Err(Error::Config("synth pairs must be positive".into()));
        }
        if self.min_frames < 4 || self.min_frames % 4 != 0 || self.max_frames % 4 != 0 || self.min_frames > self.max_frames {
            return Err(Error::Config("synth frame range must be ordered multiples of 4 from 4".into()));
        }
        if self.max_frames > crate::pose_codec::MAX_FRAMES {
            return Err(Error::Config("synth motions may not exceed 200 frames".into()));
        }
        Ok(())
    }

    /// Subcategory indices in use.
    pub fn subcategories(&self) -> Vec<usize> {
        (0..self.categories)
            .map(|i| i * SUBCATEGORIES.len() / self.categories)
            .collect()
    }
}

/// Parameters of one procedural reaction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionStyle {
    /// Forward speed, m/s.
    pub speed: f64,
    /// Heading change, rad/s.
    pub turn: f64,
    pub pelvis_height: f64,
    pub bounce_amp: f64,
    pub bounce_freq: f64,
    pub step_freq: f64,
    pub lift: f64,
    /// Sideways sway, m.
    pub sway: f64,
}

impl MotionStyle {
    pub fn for_category(corpus_seed: u64, subcategory: usize) -> Self {
        let mut rng = substream_indexed(corpus_seed, "motion-style", subcategory as u64);
        MotionStyle {
            speed: rng.random_range(0.0..1.6),
            turn: rng.random_range(-1.0..1.0),
            pelvis_height: rng.random_range(0.8..1.0),
            bounce_amp: rng.random_range(0.0..0.08),
            bounce_freq: rng.random_range(0.5..3.0),
            step_freq: rng.random_range(0.6..2.2),
            lift: rng.random_range(0.02..0.15),
            sway: rng.random_range(0.0..0.1),
        }
    }

    pub fn jittered(&self, amount: f64, rng: &mut Rng) -> Self {
        let mut j = |v: f64| v * (1.0 + rng.random_range(-amount..=amount));
        MotionStyle {
            speed: j(self.speed),
            turn: j(self.turn),
            pelvis_height: j(self.pelvis_height),
            bounce_amp: j(self.bounce_amp),
            bounce_freq: j(self.bounce_freq),
            step_freq: j(self.step_freq),
            lift: j(self.lift),
            sway: j(self.sway),
        }
    }

    /// Pelvis ground position and heading at `time` (closed form).
    fn body(&self, time: f64, heading0: f64, origin: [f64; 2]) -> ([f64; 2], f64) {
        let heading = heading0 + self.turn * time;
        let (dx, dz) = if self.turn.abs() < 1e-9 {
            (time * heading0.sin(), time * heading0.cos())
        } else {
            (
                (heading0.cos() - heading.cos()) / self.turn,
                (heading.sin() - heading0.sin()) / self.turn,
            )
        };
        ([origin[0] + self.speed * dx, origin[1] + self.speed * dz], heading)
    }

    /// Heel ground position under the body at `time` for one side.
    fn nominal_heel(&self, time: f64, side_sign: f64, heading0: f64, origin: [f64; 2]) -> ([f64; 2], f64) {
        let ([x, z], h) = self.body(time, heading0, origin);
        let (s, c) = h.sin_cos();
        let lateral = side_sign * 0.1;
        ([x + lateral * c - 0.03 * s, z - lateral * s - 0.03 * c], h)
    }

    /// Joint positions of the five-joint skeleton at 20 FPS.
    ///
    /// Each foot alternates between a planted stance half-cycle and a swing
    /// half-cycle that arcs to the next plant point, chosen under the body
    /// at the middle of the coming stance.
    pub fn render(&self, frames: usize, heading0: f64, origin: [f64; 2], phase: f64) -> Result<JointSequence> {
        let dt = 1.0 / MOTION_FPS;
        let tau = std::f64::consts::TAU;
        let freq = self.step_freq.max(1e-3);
        let mut positions = Vec::with_capacity(frames * 5);
        for t in 0..frames {
            let time = t as f64 * dt;
            let ([x, z], heading) = self.body(time, heading0, origin);
            let (s, c) = heading.sin_cos();
            let sway = self.sway * (tau * freq * 0.5 * time + phase).sin();
            let height = self.pelvis_height + self.bounce_amp * (tau * self.bounce_freq * time + phase).sin();
            positions.push([x + sway * c, height, z - sway * s]);
            for (side, sign) in [(0usize, 1.0f64), (1, -1.0)] {
                let cycle = freq * time + phase / tau + 0.5 * side as f64;
                let k = cycle.floor();
                let u = cycle - k;
                // stance k covers cycle [k, k + 0.5); its plant sits under the body mid-stance
                let plant_time = |j: f64| (j + 0.25 - phase / tau - 0.5 * side as f64) / freq;
                let (heel_xz, foot_heading, up) = if u < 0.5 {
                    let (p, h) = self.nominal_heel(plant_time(k), sign, heading0, origin);
                    (p, h, 0.0)
                } else {
                    let w = (u - 0.5) / 0.5;
                    let blend = 0.5 - 0.5 * (std::f64::consts::PI * w).cos();
                    let (a, ha) = self.nominal_heel(plant_time(k), sign, heading0, origin);
                    let (b, hb) = self.nominal_heel(plant_time(k + 1.0), sign, heading0, origin);
                    (
                        [a[0] + (b[0] - a[0]) * blend, a[1] + (b[1] - a[1]) * blend],
                        ha + (hb - ha) * blend,
                        self.lift * (std::f64::consts::PI * w).sin(),
                    )
                };
                let heel = [heel_xz[0], 0.05 + up, heel_xz[1]];
                let toe = [
                    heel[0] + 0.16 * foot_heading.sin(),
                    0.03 + up,
                    heel[2] + 0.16 * foot_heading.cos(),
                ];
                positions.push(heel);
                positions.push(toe);
            }
        }
        JointSequence::new(5, positions, MOTION_FPS)
    }
}

/// One generated pair before it is written out.
pub struct SynthPair {
    pub entry: PairEntry,
    pub features: crate::video_features::FrameFeatures,
    pub motion: MotionSequence,
}

/// Deterministically generates the corpus in memory.
pub fn synth_pairs(config: &SynthConfig, seed: u64) -> Result<Vec<SynthPair>> {
    config.validate()?;
    let provider = SyntheticProvider::new(
        SyntheticFeatureConfig {
            frames: config.feature_frames,
            dim: config.feature_dim,
            sigma: config.feature_sigma,
            corpus_seed: derive_seed(seed, "features", 0),
            ..SyntheticFeatureConfig::default()
        },
        SUBCATEGORIES.len(),
    )?;
    let subcats = config.subcategories();
    let sk = Skeleton::toy5();
    let lengths: Vec<usize> = (config.min_frames..=config.max_frames).step_by(4).collect();
    let mut out = Vec::with_capacity(config.pairs);
    for i in 0..config.pairs {
        let sub = subcats[i % subcats.len()];
        let mut rng = substream_indexed(seed, "synth-pair", i as u64);
        let style = MotionStyle::for_category(seed, sub).jittered(config.jitter, &mut rng);
        let frames = lengths[rng.random_range(0..lengths.len())];
        let heading0 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let origin = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        // one extra joint frame because encoding uses frame differences
        let joints = style.render(frames + 1, heading0, origin, phase)?;
        let motion = encode_pose_sequence(&sk, &joints, ContactThresholds::default())?;
        let features = provider.generate(derive_seed(seed, "pair-features", i as u64), sub)?;
        let pair_id = format!("pair{i:05}");
        out.push(SynthPair {
            entry: PairEntry {
                feature_path: format!("features/{pair_id}.rgvf"),
                motion_path: format!("motions/{pair_id}.rgmo"),
                pair_id,
                broad_category: broad_category_of(sub),
                subcategory: SUBCATEGORIES[sub].to_string(),
                split: None,
            },
            features,
            motion,
        });
    }
    Ok(out)
}

/// Writes the corpus under `out_dir` and returns its manifest.
pub fn synth_corpus(config: &SynthConfig, seed: u64, out_dir: &Path) -> Result<PairManifest> {
    let pairs = synth_pairs(config, seed)?;
    for sub in ["features", "motions"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut manifest = PairManifest::default();
    for p in pairs {
        write_features(&out_dir.join(&p.entry.feature_path), &p.features)?;
        write_motion(&out_dir.join(&p.entry.motion_path), &p.motion)?;
        manifest.entries.push(p.entry);
    }
    manifest.write(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Nearest-centroid accuracy of per-item vectors against their labels,
/// scoring every item against centroids computed from all items.
pub fn nearest_centroid_accuracy(vectors: &[Vec<f32>], labels: &[usize]) -> f64 {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (v, &l) in vectors.iter().zip(labels) {
        let e = sums.entry(l).or_insert_with(|| (vec![0.0; v.len()], 0));
        e.0.iter_mut().zip(v).for_each(|(s, &x)| *s += x as f64);
        e.1 += 1;
    }
    let centroids: Vec<(usize, Vec<f64>)> = sums
        .into_iter()
        .map(|(l, (s, n))| (l, s.into_iter().map(|x| x / n as f64).collect()))
        .collect();
    let correct = vectors
        .iter()
        .zip(labels)
        .filter(|(v, &l)| {
            let best = centroids
                .iter()
                .map(|(c, m)| {
                    let d: f64 = m.iter().zip(v.iter()).map(|(a, &b)| (a - b as f64).powi(2)).sum();
                    (d, *c)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .map(|x| x.1);
            best == Some(l)
        })
        .count();
    correct as f64 / vectors.len().max(1) as f64
}

/// Pooled-over-frames mean vector of a motion.
pub fn pooled(motion: &MotionSequence) -> Vec<f32> {
    let mut acc = vec![0.0f64; motion.dim()];
    for t in 0..motion.frames() {
        acc.iter_mut().zip(motion.row(t)).for_each(|(a, &x)| *a += x as f64);
    }
    acc.into_iter().map(|a| (a / motion.frames() as f64) as f32).collect()
}
