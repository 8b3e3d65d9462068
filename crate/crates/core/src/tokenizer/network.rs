//! 1D convolutional encoder and decoder over `(batch, channels, frames)`.

use candle_core::{Module, Tensor};

use crate::error::Result;
use crate::nn::{Conv1d, ConvSpec, ParamStore};

/// Total temporal downsampling factor (two stride-2 stages).
pub const DOWNSAMPLE: usize = 4;
const STAGES: usize = 2;

struct ResBlock {
    convs: Vec<(Conv1d, Conv1d)>,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, name: &str, channels: usize, depth: usize) -> Result<Self> {
        let mut convs = Vec::with_capacity(depth);
        for d in 0..depth {
            let dilation = 3usize.pow(d as u32);
            convs.push((
                ps.conv1d(&format!("{name}.{d}.dilated"), ConvSpec::dilated(channels, dilation))?,
                ps.conv1d(&format!("{name}.{d}.point"), ConvSpec::same(channels, channels, 1))?,
            ));
        }
        Ok(ResBlock { convs })
    }
}

impl Module for ResBlock {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = x.clone();
        for (dilated, point) in &self.convs {
            let y = point.forward(&dilated.forward(&h.relu()?)?.relu()?)?;
            h = (h + y)?;
        }
        Ok(h)
    }
}

pub struct MotionEncoder {
    input: Conv1d,
    stages: Vec<(Conv1d, ResBlock)>,
    output: Conv1d,
}

impl MotionEncoder {
    pub fn new(ps: &mut ParamStore, feature_dim: usize, width: usize, code_dim: usize, depth: usize) -> Result<Self> {
        let input = ps.conv1d("encoder.input", ConvSpec::same(feature_dim, width, 3))?;
        let mut stages = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            stages.push((
                ps.conv1d(&format!("encoder.down{s}"), ConvSpec::downsample(width))?,
                ResBlock::new(ps, &format!("encoder.res{s}"), width, depth)?,
            ));
        }
        let output = ps.conv1d("encoder.output", ConvSpec::same(width, code_dim, 3))?;
        Ok(MotionEncoder { input, stages, output })
    }
}

impl Module for MotionEncoder {
    /// `(B, D, N)` -> `(B, d_c, floor(N / 4))`.
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = self.input.forward(x)?.relu()?;
        for (down, res) in &self.stages {
            h = res.forward(&down.forward(&h)?)?;
        }
        self.output.forward(&h)
    }
}

pub struct MotionDecoder {
    input: Conv1d,
    stages: Vec<(ResBlock, Conv1d)>,
    mid: Conv1d,
    output: Conv1d,
}

impl MotionDecoder {
    pub fn new(
        ps: &mut ParamStore,
        code_dim: usize,
        width: usize,
        feature_dim: usize,
        depth: usize,
        zero_output: bool,
    ) -> Result<Self> {
        let input = ps.conv1d("decoder.input", ConvSpec::same(code_dim, width, 3))?;
        let mut stages = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            stages.push((
                ResBlock::new(ps, &format!("decoder.res{s}"), width, depth)?,
                ps.conv1d(&format!("decoder.up{s}"), ConvSpec::same(width, width, 3))?,
            ));
        }
        let mid = ps.conv1d("decoder.mid", ConvSpec::same(width, width, 3))?;
        let output = ps.conv1d(
            "decoder.output",
            ConvSpec {
                zero_init: zero_output,
                ..ConvSpec::same(width, feature_dim, 3)
            },
        )?;
        Ok(MotionDecoder {
            input,
            stages,
            mid,
            output,
        })
    }
}

impl Module for MotionDecoder {
    /// `(B, d_c, n)` -> `(B, D, 4 n)`.
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = self.input.forward(x)?.relu()?;
        for (res, up) in &self.stages {
            h = res.forward(&h)?;
            let len = h.dim(2)?;
            h = up.forward(&h.upsample_nearest1d(len * 2)?)?;
        }
        h = self.mid.forward(&h)?.relu()?;
        self.output.forward(&h)
    }
}
