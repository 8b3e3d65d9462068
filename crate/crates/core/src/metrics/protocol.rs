//! Repeated, seeded evaluation with 95% confidence intervals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::extractor::FeatureExtractor;
use crate::metrics::{
    diversity, fid, multimodality, FeatureSource, MotionFeatureSet, DIVERSITY_PAIRS, MULTIMODALITY_GENERATIONS,
    MULTIMODALITY_PAIRS,
};
use crate::pose_codec::MotionSequence;
use crate::rng::{derive_seed, substream};

/// Anything that turns test case `case` and a seed into one motion.
pub trait ReactionSource {
    fn cases(&self) -> usize;
    fn generate(&self, case: usize, seed: u64) -> Result<MotionSequence>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub repetitions: usize,
    pub diversity_pairs: usize,
    pub multimodality_pairs: usize,
    pub multimodality_generations: usize,
    /// Cap on how many test videos enter MultiModality.
    pub multimodality_videos: usize,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            repetitions: 20,
            diversity_pairs: DIVERSITY_PAIRS,
            multimodality_pairs: MULTIMODALITY_PAIRS,
            multimodality_generations: MULTIMODALITY_GENERATIONS,
            multimodality_videos: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub mean: f64,
    pub ci95_halfwidth: f64,
    pub repetitions: usize,
    pub values: Vec<f64>,
}

impl MetricReport {
    /// Mean and `1.96 s / sqrt(R)` with the sample standard deviation.
    pub fn from_values(name: &str, values: Vec<f64>) -> Self {
        let r = values.len();
        let mean = values.iter().sum::<f64>() / r.max(1) as f64;
        let ci = if r > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1) as f64;
            1.96 * var.sqrt() / (r as f64).sqrt()
        } else {
            0.0
        };
        MetricReport {
            name: name.to_string(),
            mean,
            ci95_halfwidth: ci,
            repetitions: r,
            values,
        }
    }
}

pub const METRIC_NAMES: [&str; 4] = ["FID", "Diversity", "MultiModality", "RealDiversity"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub repetitions: usize,
    pub metrics: Vec<MetricReport>,
}

impl ProtocolReport {
    pub fn get(&self, name: &str) -> Option<&MetricReport> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Two-row table: real-motion diversity and the generated metrics.
    pub fn to_table(&self) -> String {
        let cell = |name: &str| {
            self.get(name)
                .map(|m| format!("{:.3}±{:.3}", m.mean, m.ci95_halfwidth))
                .unwrap_or_else(|| "-".into())
        };
        let mut out = format!("{:<10} {:>16} {:>16} {:>16}\n", "Method", "FID", "Diversity", "MultiModality");
        out += &format!("{:<10} {:>16} {:>16} {:>16}\n", "Real", "-", cell("RealDiversity"), "-");
        out += &format!(
            "{:<10} {:>16} {:>16} {:>16}\n",
            "Generated",
            cell("FID"),
            cell("Diversity"),
            cell("MultiModality")
        );
        out
    }
}

/// Runs `config.repetitions` seeded rounds of generation over every test
/// case and reduces each metric to mean and confidence half-width.
pub fn evaluate_protocol(
    real: &[MotionSequence],
    source: &dyn ReactionSource,
    extractor: &FeatureExtractor,
    config: &ProtocolConfig,
) -> Result<ProtocolReport> {
    if config.repetitions == 0 {
        return Err(Error::Config("evaluation needs at least one repetition".into()));
    }
    let cases = source.cases();
    if cases < 2 || real.len() < 2 {
        return Err(Error::invalid(format!(
            "evaluation needs at least 2 test cases and real motions, got {cases} and {}",
            real.len()
        )));
    }
    let real_features = extractor.extract_set(real, FeatureSource::Real)?;
    let mm_videos = config.multimodality_videos.min(cases);
    let mut columns: [Vec<f64>; 4] = Default::default();
    for rep in 0..config.repetitions {
        let rep_seed = derive_seed(config.seed, "eval-repetition", rep as u64);
        let generated: Vec<MotionSequence> = (0..cases)
            .map(|c| source.generate(c, derive_seed(rep_seed, "generation", c as u64)))
            .collect::<Result<_>>()?;
        let gen_features = extractor.extract_set(&generated, FeatureSource::Generated)?;
        columns[0].push(fid(&real_features, &gen_features)?);
        columns[1].push(diversity(
            &gen_features,
            config.diversity_pairs,
            &mut substream(rep_seed, "diversity"),
        )?);
        let mut per_video: Vec<MotionFeatureSet> = Vec::with_capacity(mm_videos);
        for c in 0..mm_videos {
            let motions: Vec<MotionSequence> = (0..config.multimodality_generations)
                .map(|k| {
                    let idx = (c * config.multimodality_generations + k) as u64;
                    source.generate(c, derive_seed(rep_seed, "multimodality", idx))
                })
                .collect::<Result<_>>()?;
            per_video.push(extractor.extract_set(&motions, FeatureSource::Generated)?);
        }
        columns[2].push(multimodality(
            &per_video,
            config.multimodality_pairs,
            &mut substream(rep_seed, "multimodality-pairs"),
        )?);
        columns[3].push(diversity(
            &real_features,
            config.diversity_pairs,
            &mut substream(rep_seed, "real-diversity"),
        )?);
        log::info!(
            "evaluation repetition {}/{}: FID {:.4} diversity {:.4}",
            rep + 1,
            config.repetitions,
            columns[0][rep],
            columns[1][rep]
        );
    }
    let metrics = METRIC_NAMES
        .iter()
        .zip(columns)
        .map(|(name, values)| MetricReport::from_values(name, values))
        .collect();
    Ok(ProtocolReport {
        repetitions: config.repetitions,
        metrics,
    })
}
