mod common;

use std::fs;

use rand::Rng as _;
use reactgen::config::RunConfig;
use reactgen::dataset::{nearest_centroid_accuracy, synth_pairs, PairManifest, SynthConfig, SUBCATEGORIES};
use reactgen::metrics::{ExtractorConfig, FeatureExtractor};
use reactgen::pipeline::{self, fit_tokenizer, Workspace};
use reactgen::pose_codec::{MotionSequence, NormStats};
use reactgen::rng::substream;
use reactgen::tokenizer::{MotionTokenizer, TokenizerConfig};

fn corpus() -> (Vec<MotionSequence>, Vec<usize>) {
    let pairs = synth_pairs(&SynthConfig::toy(), 0).unwrap();
    let labels = pairs.iter().map(|p| p.entry.subcategory_index().unwrap()).collect();
    (pairs.into_iter().map(|p| p.motion).collect(), labels)
}

#[test]
fn extractor_features_separate_categories() {
    let (motions, labels) = corpus();
    let ex = FeatureExtractor::fit(ExtractorConfig::default(), &motions, 3).unwrap();
    let feats: Vec<Vec<f32>> = motions.iter().map(|m| ex.extract(m).unwrap()).collect();
    assert!(feats.iter().all(|f| f.len() == 64));
    let acc = nearest_centroid_accuracy(&feats, &labels);
    assert!(acc > 0.8, "nearest-centroid accuracy {acc}");
}

#[test]
fn autoencoder_overfits_four_motions() {
    let (motions, _) = corpus();
    let four: Vec<MotionSequence> = motions.into_iter().take(4).collect();
    let stats = NormStats::compute(&four).unwrap();
    let norm: Vec<MotionSequence> = four.iter().map(|m| stats.normalize(m).unwrap()).collect();
    let cfg = TokenizerConfig {
        window_frames: 40,
        batch_size: 4,
        epochs: 1000,
        ..TokenizerConfig::toy()
    };
    let (mut tok, _) = fit_tokenizer(&cfg, &norm, 1, None).unwrap();
    tok.set_norm_stats(stats).unwrap();
    for m in &four {
        let e = tok.reconstruction_mse(std::slice::from_ref(m), false).unwrap();
        assert!(e < 1e-3, "per-feature mse {e}");
    }
}

#[test]
fn large_codebook_stays_in_use() {
    let (motions, _) = corpus();
    let stats = NormStats::compute(&motions).unwrap();
    let norm: Vec<MotionSequence> = motions.iter().map(|m| stats.normalize(m).unwrap()).collect();
    let cfg = TokenizerConfig {
        codebook_size: 64,
        residual_layers: 0,
        width: 32,
        res_depth: 1,
        ..TokenizerConfig::toy()
    };
    let mut tok = MotionTokenizer::new(cfg.clone(), norm[0].dim(), 2).unwrap();
    let mut trainer = tok.trainer().unwrap();
    let mut rng = substream(2, "usage");
    for _ in 0..1000 {
        let batch: Vec<MotionSequence> = (0..cfg.batch_size)
            .map(|_| {
                let m = &norm[rng.random_range(0..norm.len())];
                m.window(rng.random_range(0..=m.frames() - 32), 32).unwrap()
            })
            .collect();
        let refs: Vec<&MotionSequence> = batch.iter().collect();
        tok.train_step(&refs, &mut trainer, &mut rng).unwrap();
    }
    let usage = tok.codebook_usage(0);
    assert!(usage >= 0.7, "codebook usage {usage}");
}

#[test]
fn stages_are_deterministic_under_a_fixed_seed() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let cfg = common::tiny_config(dir.path());
        let ws = Workspace::new(dir.path());
        pipeline::synth_data(&cfg, &ws, false).unwrap();
        pipeline::split(&cfg, &ws, false).unwrap();
        pipeline::train_tokenizer(&cfg, &ws, false).unwrap();
        pipeline::train_base(&cfg, &ws, false).unwrap();
    }
    for rel in ["data/split.jsonl", "checkpoints/tokenizer.safetensors", "checkpoints/base.safetensors"] {
        assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn held_out_subcategories_form_the_unseen_set() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: RunConfig = common::tiny_config(dir.path());
    let used = cfg.data.subcategories();
    cfg.split.held_out = vec![SUBCATEGORIES[used[0]].to_string()];
    let ws = Workspace::new(dir.path());
    pipeline::synth_data(&cfg, &ws, false).unwrap();
    let split = pipeline::split(&cfg, &ws, false).unwrap();
    let unseen = PairManifest::read(&ws.unseen()).unwrap();
    assert_eq!(unseen.len(), 5);
    assert_eq!(split.len() + unseen.len(), 40);
    assert!(split.entries.iter().all(|e| e.subcategory != cfg.split.held_out[0]));
}

#[test]
fn residual_model_from_another_tokenizer_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(dir.path());
    let ws = Workspace::new(dir.path());
    pipeline::synth_data(&cfg, &ws, false).unwrap();
    pipeline::split(&cfg, &ws, false).unwrap();
    pipeline::train_tokenizer(&cfg, &ws, false).unwrap();
    pipeline::train_base(&cfg, &ws, false).unwrap();
    pipeline::train_residual(&cfg, &ws, false).unwrap();
    let mut retrained = cfg.clone();
    retrained.seed = 1;
    pipeline::train_tokenizer(&retrained, &ws, true).unwrap();
    let err = pipeline::ReactionModels::load(&ws).err().expect("stale models must not load");
    assert!(matches!(err, reactgen::Error::Config(_)), "{err}");
}
