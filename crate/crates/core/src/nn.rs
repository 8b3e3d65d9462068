//! Minimal layer toolkit over candle with seeded parameter initialization.
//!
//! The CPU backend cannot seed its own generator, so parameters are drawn
//! here from a named stream and wrapped as [`Var`]s. Layer norm and
//! softmax are written from differentiable primitives.

use std::collections::HashMap;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::{Embedding, Linear};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{substream, Rng};

/// Forward-pass mode. Training carries the generator used by dropout.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Owns every trainable tensor of a model under a dotted name.
pub struct ParamStore {
    vars: Vec<(String, Var)>,
    rng: Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, name: &str) -> Self {
        ParamStore {
            vars: Vec::new(),
            rng: substream(seed, name),
            device: Device::Cpu,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn register(&mut self, name: String, values: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.iter().any(|(n, _)| *n == name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.push((name, var));
        Ok(out)
    }

    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f32) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.register(name, values, shape)
    }

    pub fn normal(&mut self, name: String, shape: &[usize], std: f32) -> Result<Tensor> {
        let n = shape.iter().product();
        let dist = Normal::new(0.0f32, std).map_err(|e| Error::invalid(e.to_string()))?;
        let values = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.register(name, values, shape)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f32) -> Result<Tensor> {
        let n = shape.iter().product();
        self.register(name, vec![value; n], shape)
    }

    pub fn linear(&mut self, name: &str, input: usize, output: usize, bias: bool) -> Result<Linear> {
        let bound = 1.0 / (input as f32).sqrt();
        let w = self.uniform(format!("{name}.weight"), &[output, input], bound)?;
        let b = if bias {
            Some(self.uniform(format!("{name}.bias"), &[output], bound)?)
        } else {
            None
        };
        Ok(Linear::new(w, b))
    }

    pub fn linear_zeroed(&mut self, name: &str, input: usize, output: usize) -> Result<Linear> {
        let w = self.constant(format!("{name}.weight"), &[output, input], 0.0)?;
        let b = self.constant(format!("{name}.bias"), &[output], 0.0)?;
        Ok(Linear::new(w, Some(b)))
    }

    pub fn conv1d(&mut self, name: &str, spec: ConvSpec) -> Result<Conv1d> {
        let fan_in = spec.input * spec.kernel;
        let bound = 1.0 / (fan_in as f32).sqrt();
        let shape = [spec.output, spec.input, spec.kernel];
        let (w, b) = if spec.zero_init {
            (
                self.constant(format!("{name}.weight"), &shape, 0.0)?,
                self.constant(format!("{name}.bias"), &[spec.output], 0.0)?,
            )
        } else {
            (
                self.uniform(format!("{name}.weight"), &shape, bound)?,
                self.uniform(format!("{name}.bias"), &[spec.output], bound)?,
            )
        };
        Ok(Conv1d {
            weight: w,
            bias: b,
            spec,
        })
    }

    pub fn embedding(&mut self, name: &str, count: usize, dim: usize) -> Result<Embedding> {
        let w = self.normal(format!("{name}.weight"), &[count, dim], 0.02)?;
        Ok(Embedding::new(w, dim))
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            weight: self.constant(format!("{name}.weight"), &[dim], 1.0)?,
            bias: self.constant(format!("{name}.bias"), &[dim], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.as_tensor().elem_count()).sum()
    }

    /// Overwrites every parameter from `tensors`; names and shapes must match exactly.
    pub fn load(&self, tensors: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, var) in &self.vars {
            let key = format!("{prefix}{name}");
            let t = tensors
                .get(&key)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks parameter {key}")))?;
            if t.dims() != var.as_tensor().dims() {
                return Err(Error::invalid(format!(
                    "parameter {key} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.as_tensor().dims()
                )));
            }
            var.set(&t.to_dtype(DType::F32)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub input: usize,
    pub output: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub zero_init: bool,
}

impl ConvSpec {
    /// Length-preserving convolution with odd kernel.
    pub fn same(input: usize, output: usize, kernel: usize) -> Self {
        ConvSpec {
            input,
            output,
            kernel,
            stride: 1,
            padding: kernel / 2,
            dilation: 1,
            zero_init: false,
        }
    }

    pub fn dilated(channels: usize, dilation: usize) -> Self {
        ConvSpec {
            padding: dilation,
            dilation,
            ..ConvSpec::same(channels, channels, 3)
        }
    }

    /// Kernel 4, stride 2, padding 1: halves the length (floor).
    pub fn downsample(channels: usize) -> Self {
        ConvSpec {
            input: channels,
            output: channels,
            kernel: 4,
            stride: 2,
            padding: 1,
            dilation: 1,
            zero_init: false,
        }
    }
}

/// 1D convolution lowered to a gather of input taps and one matmul.
///
/// The built-in convolution's kernel gradient is wrong for batches larger
/// than one, so both passes go through differentiable primitives here.
pub struct Conv1d {
    weight: Tensor,
    bias: Tensor,
    spec: ConvSpec,
}

impl Conv1d {
    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn output_len(&self, input_len: usize) -> Option<usize> {
        let s = self.spec;
        let span = s.dilation * (s.kernel - 1) + 1;
        let padded = input_len + 2 * s.padding;
        (padded >= span).then(|| (padded - span) / s.stride + 1)
    }
}

impl Module for Conv1d {
    /// `(B, C_in, L)` -> `(B, C_out, L_out)`.
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, l) = x.dims3()?;
        let s = self.spec;
        if c != s.input {
            candle_core::bail!("conv expects {} input channels, got {c}", s.input);
        }
        let out_len = match self.output_len(l) {
            Some(n) if n > 0 => n,
            _ => candle_core::bail!("input of length {l} is shorter than the kernel span"),
        };
        let padded = if s.padding > 0 {
            x.pad_with_zeros(2, s.padding, s.padding)?
        } else {
            x.clone()
        };
        let idx: Vec<u32> = (0..s.kernel)
            .flat_map(|i| (0..out_len).map(move |o| (o * s.stride + i * s.dilation) as u32))
            .collect();
        let idx = Tensor::from_vec(idx, s.kernel * out_len, x.device())?;
        // (B, C, k * L_out) -> (B, C * k, L_out), rows ordered (channel, tap)
        let cols = padded.index_select(&idx, 2)?.reshape((b, c * s.kernel, out_len))?;
        let w = self.weight.reshape((s.output, c * s.kernel))?;
        w.broadcast_matmul(&cols)?
            .broadcast_add(&self.bias.reshape((1, s.output, 1))?)
    }
}

pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

pub fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

pub fn log_softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    shifted.broadcast_sub(&lse)
}

pub fn dropout(x: &Tensor, p: f32, mode: &mut Mode) -> candle_core::Result<Tensor> {
    match mode {
        Mode::Train(rng) if p > 0.0 => {
            let keep = 1.0 - p;
            let mask: Vec<f32> = (0..x.elem_count())
                .map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let mask = Tensor::from_vec(mask, x.dims(), x.device())?;
            x.mul(&mask)
        }
        _ => Ok(x.clone()),
    }
}

/// Elementwise smooth-L1 (Huber with unit transition), averaged.
pub fn smooth_l1(pred: &Tensor, target: &Tensor) -> candle_core::Result<Tensor> {
    let a = (pred - target)?.abs()?;
    let small = a.clamp(0f32, 1f32)?;
    // 0.5 min(a,1)^2 + (a - min(a,1))
    let per = ((small.sqr()? * 0.5)? + (a - &small)?)?;
    per.mean_all()
}

/// Additive key mask: 0 where attended, -inf where blocked.
pub fn additive_key_mask(blocked: &[Vec<bool>], device: &Device) -> Result<Tensor> {
    let b = blocked.len();
    let l = blocked.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(b * l);
    for row in blocked {
        if row.len() != l {
            return Err(Error::invalid("ragged attention mask"));
        }
        data.extend(row.iter().map(|&m| if m { f32::NEG_INFINITY } else { 0.0 }));
    }
    Ok(Tensor::from_vec(data, (b, 1, 1, l), device)?)
}

/// Multi-head scaled dot-product attention with separate memory stream.
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, memory_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            q: ps.linear(&format!("{name}.q"), dim, dim, true)?,
            k: ps.linear(&format!("{name}.k"), memory_dim, dim, true)?,
            v: ps.linear(&format!("{name}.v"), memory_dim, dim, true)?,
            out: ps.linear(&format!("{name}.out"), dim, dim, true)?,
            heads,
            head_dim: dim / heads,
        })
    }

    fn split(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, l, _) = x.dims3()?;
        x.reshape((b, l, self.heads, self.head_dim))?.transpose(1, 2)?.contiguous()
    }

    /// Returns the attended output `(B, Lq, dim)` and weights `(B, heads, Lq, Lk)`.
    pub fn forward(
        &self,
        query: &Tensor,
        memory: &Tensor,
        key_mask: Option<&Tensor>,
    ) -> candle_core::Result<(Tensor, Tensor)> {
        let (b, lq, dim) = query.dims3()?;
        let q = self.split(&self.q.forward(query)?)?;
        let k = self.split(&self.k.forward(memory)?)?;
        let v = self.split(&self.v.forward(memory)?)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        if let Some(mask) = key_mask {
            scores = scores.broadcast_add(mask)?;
        }
        let weights = softmax_last(&scores)?;
        let ctx = weights.matmul(&v)?.transpose(1, 2)?.reshape((b, lq, dim))?;
        Ok((self.out.forward(&ctx)?, weights))
    }
}

/// Two-layer position-wise feed-forward block with GELU.
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize, out: usize) -> Result<Self> {
        Ok(FeedForward {
            up: ps.linear(&format!("{name}.up"), dim, hidden, true)?,
            down: ps.linear(&format!("{name}.down"), hidden, out, true)?,
        })
    }
}

impl Module for FeedForward {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.gelu_erf()?)
    }
}

/// Row-major `f32` values of a tensor of any rank.
pub fn to_flat(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
}
