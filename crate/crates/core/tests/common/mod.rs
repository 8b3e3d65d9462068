#![allow(dead_code)]

use std::path::Path;

use reactgen::config::RunConfig;

/// Toy profile shrunk so a full pipeline runs in seconds.
pub fn tiny_config(work_dir: &Path) -> RunConfig {
    let mut c = RunConfig::toy();
    c.paths.work_dir = work_dir.to_path_buf();
    c.data.pairs = 40;
    c.tokenizer.width = 16;
    c.tokenizer.res_depth = 1;
    c.tokenizer.epochs = 2;
    c.transformer.latent_dim = 32;
    c.transformer.ffn_dim = 32;
    c.transformer.base_epochs = 2;
    c.transformer.residual_epochs = 2;
    c.transformer.warmup_iters = 2;
    c.decode.iterations = 3;
    c.evaluation.extractor.width = 8;
    c.evaluation.extractor.feature_dim = 8;
    c.evaluation.extractor.iterations = 3;
    c.evaluation.protocol.repetitions = 2;
    c.evaluation.protocol.multimodality_videos = 2;
    c
}
