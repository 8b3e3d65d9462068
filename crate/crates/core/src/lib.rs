//! Video-conditioned reactive motion generation.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod pose_codec;
pub mod reaction;
pub mod rng;
pub mod tokenizer;
pub mod train;
pub mod video_features;

pub use error::{Error, Result};
