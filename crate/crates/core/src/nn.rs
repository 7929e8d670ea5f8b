//! Transformer building blocks shared by the language model and the
//! flow-matching network. Everything is composed from differentiable tensor
//! primitives so gradients are available in both f32 and f64.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Shape, Tensor, Var, D};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, Linear, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub type CResult<T> = candle_core::Result<T>;

const LN_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e9;

/// Named trainable parameters with seeded, name-addressed initialization:
/// a parameter's initial value depends only on the store seed and its name,
/// never on construction order or a global RNG.
#[derive(Clone)]
pub struct ParamStore {
    vars: VarMap,
    seed: u64,
}

struct SeededBackend {
    vars: VarMap,
    seed: u64,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the store seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn seeded_init(seed: u64, name: &str, shape: &Shape, init: Init, dtype: DType, dev: &Device) -> CResult<Tensor> {
    let n = shape.elem_count();
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
    let values: Vec<f64> = match init {
        Init::Const(c) => vec![c; n],
        Init::Uniform { lo, up } => (0..n).map(|_| rng.random_range(lo..up)).collect(),
        Init::Randn { mean, stdev } => {
            let d = Normal::new(mean, stdev).map_err(candle_core::Error::wrap)?;
            (0..n).map(|_| d.sample(&mut rng)).collect()
        }
        Init::Kaiming { dist, fan, non_linearity } => {
            let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
            match dist {
                candle_nn::init::NormalOrUniform::Uniform => {
                    let b = 3f64.sqrt() * std;
                    (0..n).map(|_| rng.random_range(-b..b)).collect()
                }
                candle_nn::init::NormalOrUniform::Normal => {
                    let d = Normal::new(0.0, std).map_err(candle_core::Error::wrap)?;
                    (0..n).map(|_| d.sample(&mut rng)).collect()
                }
            }
        }
    };
    Tensor::from_vec(values, shape.clone(), dev)?.to_dtype(dtype)
}

impl SimpleBackend for SeededBackend {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> CResult<Tensor> {
        let mut data = self.vars.data().lock().expect("param store poisoned");
        if let Some(v) = data.get(name) {
            if v.shape() != &s {
                candle_core::bail!("shape mismatch on {name}: {s:?} <> {:?}", v.shape());
            }
            return Ok(v.as_tensor().clone());
        }
        let var = Var::from_tensor(&seeded_init(self.seed, name, &s, h, dtype, dev)?)?;
        let t = var.as_tensor().clone();
        data.insert(name.to_string(), var);
        Ok(t)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> CResult<Tensor> {
        candle_core::bail!("parameter `{name}` must be created with a shape")
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.vars.data().lock().expect("param store poisoned").contains_key(name)
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            vars: VarMap::new(),
            seed,
        }
    }

    pub fn builder(&self, dtype: DType, dev: &Device) -> VarBuilder<'static> {
        VarBuilder::from_backend(
            Box::new(SeededBackend {
                vars: self.vars.clone(),
                seed: self.seed,
            }),
            dtype,
            dev.clone(),
        )
    }

    /// Variables whose names start with `prefix`, sorted by name.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        let data = self.vars.data().lock().expect("param store poisoned");
        let mut named: Vec<_> = data.iter().filter(|(k, _)| k.starts_with(prefix)).collect();
        named.sort_by(|a, b| a.0.cmp(b.0));
        named.into_iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars_with_prefix("")
    }

    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        let data = self.vars.data().lock().expect("param store poisoned");
        data.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.data().lock().expect("param store poisoned").get(name).cloned()
    }

    /// Overwrite every existing parameter from `tensors`; names and shapes must match exactly.
    pub fn assign(&self, tensors: &BTreeMap<String, Tensor>) -> CResult<()> {
        let data = self.vars.data().lock().expect("param store poisoned");
        if data.len() != tensors.len() {
            candle_core::bail!("expected {} parameters, got {}", data.len(), tensors.len());
        }
        for (name, var) in data.iter() {
            let t = tensors
                .get(name)
                .ok_or_else(|| candle_core::Error::Msg(format!("missing parameter `{name}`")))?;
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let data = self.vars.data().lock().expect("param store poisoned");
        data.values().map(|v| v.elem_count()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            peak_lr: 7.5e-5,
            warmup_steps: 200,
            steps: 2000,
            batch_size: 8,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.98,
        }
    }
}

impl OptimConfig {
    /// Linear warmup to the peak, then linear decay to zero at `steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay = self.steps.saturating_sub(self.warmup_steps).max(1);
        let k = (step - self.warmup_steps) as f64 / decay as f64;
        self.peak_lr * (1.0 - k).max(0.0)
    }

    pub fn validate(&self) -> crate::error::Result<()> {
        if !(self.peak_lr > 0.0) || self.batch_size == 0 {
            return Err(crate::error::Error::Config("optimizer needs peak_lr > 0 and batch_size > 0".into()));
        }
        Ok(())
    }
}

/// Linear layer with N(0, 1/in) weights and zero bias.
pub fn linear(in_dim: usize, out_dim: usize, vb: VarBuilder) -> CResult<Linear> {
    let w = vb.get_with_hints(
        (out_dim, in_dim),
        "weight",
        Init::Randn {
            mean: 0.0,
            stdev: 1.0 / (in_dim as f64).sqrt(),
        },
    )?;
    let b = vb.get_with_hints(out_dim, "bias", Init::Const(0.0))?;
    Ok(Linear::new(w, Some(b)))
}

/// Linear layer whose weight and bias start at zero.
pub fn linear_zeros(in_dim: usize, out_dim: usize, vb: VarBuilder) -> CResult<Linear> {
    let w = vb.get_with_hints((out_dim, in_dim), "weight", Init::Const(0.0))?;
    let b = vb.get_with_hints(out_dim, "bias", Init::Const(0.0))?;
    Ok(Linear::new(w, Some(b)))
}

/// Layer normalization over the last dimension without affine parameters.
pub fn layer_norm(x: &Tensor) -> CResult<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(dim: usize, vb: VarBuilder) -> CResult<Self> {
        Ok(Self {
            weight: vb.get_with_hints(dim, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(dim, "bias", Init::Const(0.0))?,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        layer_norm(x)?.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// Softmax over the last dimension built from primitive ops.
pub fn softmax_last(x: &Tensor) -> CResult<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

pub fn log_softmax_last(x: &Tensor) -> CResult<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    shifted.broadcast_sub(&lse)
}

/// Rotary position tables for `head_dim`-wide heads (rotate-half layout).
#[derive(Debug, Clone)]
pub struct Rotary {
    cos: Tensor,
    sin: Tensor,
}

impl Rotary {
    pub fn new(head_dim: usize, max_len: usize, dtype: DType, dev: &Device) -> CResult<Self> {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_len * head_dim);
        let mut sin = Vec::with_capacity(max_len * head_dim);
        for p in 0..max_len {
            // both halves share the same frequencies
            for _ in 0..2 {
                for i in 0..half {
                    let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / head_dim as f64);
                    let a = p as f64 * freq;
                    cos.push(a.cos());
                    sin.push(a.sin());
                }
            }
        }
        Ok(Self {
            cos: Tensor::from_vec(cos, (max_len, head_dim), dev)?.to_dtype(dtype)?,
            sin: Tensor::from_vec(sin, (max_len, head_dim), dev)?.to_dtype(dtype)?,
        })
    }

    pub fn max_len(&self) -> usize {
        self.cos.dim(0).unwrap_or(0)
    }

    /// `x`: `(B, heads, T, head_dim)`.
    pub fn apply(&self, x: &Tensor) -> CResult<Tensor> {
        let t = x.dim(2)?;
        let hd = x.dim(3)?;
        if t > self.max_len() {
            candle_core::bail!("sequence length {t} exceeds rotary table {}", self.max_len());
        }
        let cos = self.cos.narrow(0, 0, t)?;
        let sin = self.sin.narrow(0, 0, t)?;
        let x1 = x.narrow(D::Minus1, 0, hd / 2)?;
        let x2 = x.narrow(D::Minus1, hd / 2, hd / 2)?;
        let rotated = Tensor::cat(&[&x2.neg()?, &x1], D::Minus1)?;
        x.broadcast_mul(&cos)? + rotated.broadcast_mul(&sin)?
    }
}

/// Additive causal mask `(T, T)`: 0 on and below the diagonal, large negative above.
pub fn causal_mask(t: usize, dtype: DType, dev: &Device) -> CResult<Tensor> {
    let v: Vec<f64> = (0..t * t)
        .map(|k| if k % t > k / t { MASK_NEG } else { 0.0 })
        .collect();
    Tensor::from_vec(v, (t, t), dev)?.to_dtype(dtype)
}

#[derive(Debug, Clone)]
pub struct SelfAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(dim: usize, heads: usize, vb: VarBuilder) -> CResult<Self> {
        if dim % heads != 0 || (dim / heads) % 2 != 0 {
            candle_core::bail!("hidden {dim} must split into {heads} even-width heads");
        }
        Ok(Self {
            qkv: linear(dim, 3 * dim, vb.pp("qkv"))?,
            out: linear(dim, dim, vb.pp("out"))?,
            heads,
        })
    }

    /// `x`: `(B, T, dim)`; `mask`: optional additive `(T, T)`.
    pub fn forward(&self, x: &Tensor, rope: &Rotary, mask: Option<&Tensor>) -> CResult<Tensor> {
        let (b, t, dim) = x.dims3()?;
        let hd = dim / self.heads;
        let qkv = self.qkv.forward(x)?.reshape((b, t, 3, self.heads, hd))?;
        let qkv = qkv.permute((2, 0, 3, 1, 4))?;
        let q = rope.apply(&qkv.get(0)?.contiguous()?)?;
        let k = rope.apply(&qkv.get(1)?.contiguous()?)?;
        let v = qkv.get(2)?.contiguous()?;
        let mut att = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        if let Some(m) = mask {
            att = att.broadcast_add(m)?;
        }
        let att = softmax_last(&att)?;
        let y = att.matmul(&v)?.transpose(1, 2)?.reshape((b, t, dim))?;
        self.out.forward(&y)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(dim: usize, hidden: usize, vb: VarBuilder) -> CResult<Self> {
        Ok(Self {
            fc1: linear(dim, hidden, vb.pp("fc1"))?,
            fc2: linear(hidden, dim, vb.pp("fc2"))?,
        })
    }
}

impl Module for Mlp {
    fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    pub fn new(dim: usize, heads: usize, mlp_ratio: usize, vb: VarBuilder) -> CResult<Self> {
        Ok(Self {
            ln1: LayerNorm::new(dim, vb.pp("ln1"))?,
            attn: SelfAttention::new(dim, heads, vb.pp("attn"))?,
            ln2: LayerNorm::new(dim, vb.pp("ln2"))?,
            mlp: Mlp::new(dim, dim * mlp_ratio, vb.pp("mlp"))?,
        })
    }

    pub fn forward(&self, x: &Tensor, rope: &Rotary, mask: Option<&Tensor>) -> CResult<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?, rope, mask)?)?;
        &x + self.mlp.forward(&self.ln2.forward(&x)?)?
    }
}

/// Depthwise 1-D convolution over time with zero "same" padding, computed as
/// a sum of shifted slices. `x`: `(B, T, C)`; weight `(kernel, C)`.
#[derive(Debug, Clone)]
pub struct DepthwiseConv {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
}

impl DepthwiseConv {
    pub fn new(channels: usize, kernel: usize, vb: VarBuilder) -> CResult<Self> {
        if kernel % 2 == 0 {
            candle_core::bail!("depthwise kernel must be odd, got {kernel}");
        }
        let bound = 1.0 / (kernel as f64).sqrt();
        Ok(Self {
            weight: vb.get_with_hints(
                (kernel, channels),
                "weight",
                Init::Uniform { lo: -bound, up: bound },
            )?,
            bias: vb.get_with_hints(channels, "bias", Init::Const(0.0))?,
            kernel,
        })
    }

    pub fn half_width(&self) -> usize {
        self.kernel / 2
    }
}

impl Module for DepthwiseConv {
    fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        let (_, t, _) = x.dims3()?;
        let p = self.kernel / 2;
        let padded = x.pad_with_zeros(1, p, p)?;
        let mut acc: Option<Tensor> = None;
        for k in 0..self.kernel {
            let w = self.weight.get(k)?;
            let term = padded.narrow(1, k, t)?.broadcast_mul(&w)?;
            acc = Some(match acc {
                None => term,
                Some(a) => (a + term)?,
            });
        }
        acc.expect("kernel >= 1").broadcast_add(&self.bias)
    }
}

/// Sinusoidal embedding of scalar times `t`: `(B,)` -> `(B, dim)`.
pub fn sinusoidal_embedding(t: &Tensor, dim: usize, scale: f64) -> CResult<Tensor> {
    let half = dim / 2;
    let dev = t.device();
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp() * scale)
        .collect();
    let freqs = Tensor::from_vec(freqs, (1, half), dev)?.to_dtype(t.dtype())?;
    let args = t.unsqueeze(1)?.broadcast_mul(&freqs)?;
    Tensor::cat(&[&args.sin()?, &args.cos()?], 1)
}

/// Scalar sum of squared entries of every tensor; handy for tests.
pub fn sum_sq(ts: &[&Tensor]) -> CResult<f64> {
    let mut acc = 0.0;
    for t in ts {
        acc += t.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
    }
    Ok(acc)
}
