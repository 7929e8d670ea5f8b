use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Embedding, Init, Linear, VarBuilder};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::condition::MelNorm;
use crate::error::{Error, Result};
use crate::nn::{layer_norm, linear, linear_zeros, sinusoidal_embedding, CResult, DepthwiseConv, LayerNorm, ParamStore, Rotary, SelfAttention};

const TIME_SCALE: f64 = 1000.0;
const LAYER_SCALE_INIT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FmseConfig {
    /// Semantic vocabulary size; id `k` is the filler.
    pub k: usize,
    pub n_mels: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    pub token_dim: usize,
    pub token_blocks: usize,
    pub token_kernel: usize,
    pub max_positions: usize,
}

impl FmseConfig {
    pub fn small(k: usize) -> Self {
        Self {
            k,
            n_mels: 100,
            hidden: 256,
            heads: 4,
            layers: 6,
            mlp_ratio: 2,
            token_dim: 64,
            token_blocks: 2,
            token_kernel: 7,
            max_positions: 4096,
        }
    }

    pub fn filler(&self) -> u32 {
        self.k as u32
    }

    /// Width of the concatenated network input.
    pub fn input_dim(&self) -> usize {
        3 * self.n_mels + 2 + self.token_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.hidden == 0 || self.heads == 0 || self.n_mels == 0 || self.token_dim == 0 {
            return Err(Error::Config("fmse dimensions must be positive".into()));
        }
        if self.hidden % self.heads != 0 || (self.hidden / self.heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "fmse hidden {} must split into {} even-width heads",
                self.hidden, self.heads
            )));
        }
        if self.token_kernel % 2 == 0 {
            return Err(Error::Config("token_kernel must be odd".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (h, c, f) = (self.hidden, self.token_dim, self.n_mels);
        let r = self.mlp_ratio * h;
        let token_block = (self.token_kernel * c + c) + 2 * c + (c * 2 * c + 2 * c) + (2 * c * c + c) + c;
        let tokens = (self.k + 1) * c + self.token_blocks * token_block;
        let time = 2 * (h * h + h);
        let input = self.input_dim() * h + h;
        let block = (4 * h * h + 4 * h) + (h * r + r + r * h + h) + (h * 6 * h + 6 * h);
        let last = (h * 2 * h + 2 * h) + 2 * (h * f + f);
        tokens + time + input + self.layers * block + last
    }
}

/// ConvNeXt-style block: depthwise conv, norm, pointwise MLP, layer scale.
#[derive(Debug, Clone)]
struct TokenBlock {
    dw: DepthwiseConv,
    norm: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    gamma: Tensor,
}

impl TokenBlock {
    fn new(c: usize, kernel: usize, vb: VarBuilder) -> CResult<Self> {
        Ok(Self {
            dw: DepthwiseConv::new(c, kernel, vb.pp("dw"))?,
            norm: LayerNorm::new(c, vb.pp("norm"))?,
            fc1: linear(c, 2 * c, vb.pp("fc1"))?,
            fc2: linear(2 * c, c, vb.pp("fc2"))?,
            gamma: vb.get_with_hints(c, "gamma", Init::Const(LAYER_SCALE_INIT))?,
        })
    }
}

impl Module for TokenBlock {
    fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        let y = self.norm.forward(&self.dw.forward(x)?)?;
        let y = self.fc2.forward(&self.fc1.forward(&y)?.gelu()?)?;
        x + y.broadcast_mul(&self.gamma)?
    }
}

/// Transformer block with adaptive-norm time conditioning whose gates start at zero.
#[derive(Debug, Clone)]
struct DitBlock {
    attn: SelfAttention,
    fc1: Linear,
    fc2: Linear,
    modulation: Linear,
}

fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> CResult<Tensor> {
    // x: (B, T, H); shift/scale: (B, 1, H)
    layer_norm(x)?.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(shift)
}

impl DitBlock {
    fn new(h: usize, heads: usize, mlp_ratio: usize, vb: VarBuilder) -> CResult<Self> {
        Ok(Self {
            attn: SelfAttention::new(h, heads, vb.pp("attn"))?,
            fc1: linear(h, mlp_ratio * h, vb.pp("fc1"))?,
            fc2: linear(mlp_ratio * h, h, vb.pp("fc2"))?,
            modulation: linear_zeros(h, 6 * h, vb.pp("modulation"))?,
        })
    }

    fn forward(&self, x: &Tensor, c: &Tensor, rope: &Rotary) -> CResult<Tensor> {
        let m = self.modulation.forward(c)?.unsqueeze(1)?.chunk(6, D::Minus1)?;
        let a = self.attn.forward(&modulate(x, &m[0], &m[1])?, rope, None)?;
        let x = (x + a.broadcast_mul(&m[2])?)?;
        let y = self.fc2.forward(&self.fc1.forward(&modulate(&x, &m[3], &m[4])?)?.gelu()?)?;
        &x + y.broadcast_mul(&m[5])?
    }
}

/// Per-frame network inputs for a batch, all `(B, T, ·)` in the model dtype.
#[derive(Debug, Clone)]
pub struct NetInputs {
    pub x_t: Tensor,
    pub ctx_clean: Tensor,
    /// `(B, T, 1)`, 1 where the clean context is real data.
    pub clean_flag: Tensor,
    pub ctx_degraded: Tensor,
    pub degraded_flag: Tensor,
    /// `(B, T)` u32 token ids padded with the filler.
    pub tokens: Tensor,
    /// `(B,)` flow times.
    pub t: Tensor,
}

pub struct Fmse {
    pub cfg: FmseConfig,
    pub store: ParamStore,
    pub steps_trained: u64,
    /// Log-mel normalization fitted on the training corpus.
    pub norm: MelNorm,
    token_embed: Embedding,
    token_blocks: Vec<TokenBlock>,
    time_fc1: Linear,
    time_fc2: Linear,
    input: Linear,
    blocks: Vec<DitBlock>,
    final_modulation: Linear,
    out: Linear,
    skip: Linear,
    rope: Rotary,
    dtype: DType,
    device: Device,
}

impl Fmse {
    pub fn new(cfg: FmseConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let device = Device::Cpu;
        let store = ParamStore::new(seed);
        let vb = store.builder(dtype, &device);
        let (h, c) = (cfg.hidden, cfg.token_dim);
        let vt = vb.pp("tokens");
        let table = vt.pp("embed").get_with_hints((cfg.k + 1, c), "weight", Init::Randn { mean: 0.0, stdev: 1.0 })?;
        let token_blocks = (0..cfg.token_blocks)
            .map(|i| TokenBlock::new(c, cfg.token_kernel, vt.pp(format!("block{i}"))))
            .collect::<CResult<_>>()?;
        let vd = vb.pp("dit");
        let blocks = (0..cfg.layers)
            .map(|i| DitBlock::new(h, cfg.heads, cfg.mlp_ratio, vd.pp(format!("block{i}"))))
            .collect::<CResult<_>>()?;
        Ok(Self {
            token_embed: Embedding::new(table, c),
            token_blocks,
            time_fc1: linear(h, h, vd.pp("time.fc1"))?,
            time_fc2: linear(h, h, vd.pp("time.fc2"))?,
            input: linear(cfg.input_dim(), h, vd.pp("input"))?,
            blocks,
            final_modulation: linear_zeros(h, 2 * h, vd.pp("final.modulation"))?,
            out: linear_zeros(h, cfg.n_mels, vd.pp("final.out"))?,
            skip: linear_zeros(h, cfg.n_mels, vd.pp("final.skip"))?,
            rope: Rotary::new(h / cfg.heads, cfg.max_positions, dtype, &device)?,
            cfg,
            store,
            steps_trained: 0,
            norm: MelNorm::default(),
            dtype,
            device,
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Token channel `(B, T, C)` from filler-padded ids `(B, T)`.
    pub fn encode_token_ids(&self, ids: &Tensor) -> CResult<Tensor> {
        let mut x = self.token_embed.forward(ids)?;
        for b in &self.token_blocks {
            x = b.forward(&x)?;
        }
        Ok(x)
    }

    /// Right-pad `ids` with the filler to `t` frames (truncating with a
    /// warning if longer) and encode them into a `C x T` channel.
    pub fn encode_tokens(&self, ids: &[u32], t: usize) -> Result<Array2<f64>> {
        let padded = pad_tokens(ids, t, self.cfg.filler());
        let x = self.encode_token_ids(&Tensor::new(padded.as_slice(), &self.device)?.unsqueeze(0)?)?;
        let v: Vec<Vec<f64>> = x.squeeze(0)?.to_dtype(DType::F64)?.to_vec2()?;
        Ok(Array2::from_shape_fn((self.cfg.token_dim, t), |(c, f)| v[f][c]))
    }

    /// Velocity `(B, T, F)`.
    pub fn forward(&self, inp: &NetInputs) -> CResult<Tensor> {
        let tok = self.encode_token_ids(&inp.tokens)?;
        let x = Tensor::cat(
            &[
                &inp.x_t,
                &inp.ctx_clean,
                &inp.clean_flag,
                &inp.ctx_degraded,
                &inp.degraded_flag,
                &tok,
            ],
            D::Minus1,
        )?;
        let mut x = self.input.forward(&x)?;
        let temb = sinusoidal_embedding(&inp.t, self.cfg.hidden, TIME_SCALE)?;
        let c = self.time_fc2.forward(&self.time_fc1.forward(&temb)?.silu()?)?.silu()?;
        for b in &self.blocks {
            x = b.forward(&x, &c, &self.rope)?;
        }
        let m = self.final_modulation.forward(&c)?.unsqueeze(1)?.chunk(2, D::Minus1)?;
        // Per-bin, time-dependent gain on the state itself, so the hidden
        // width does not have to carry every mel bin of x_t.
        let skip = inp.x_t.broadcast_mul(&self.skip.forward(&c)?.unsqueeze(1)?)?;
        self.out.forward(&modulate(&x, &m[0], &m[1])?)? + skip
    }
}

pub fn pad_tokens(ids: &[u32], t: usize, filler: u32) -> Vec<u32> {
    if ids.len() > t {
        log::warn!("token sequence of {} truncated to {t} frames", ids.len());
    }
    let mut out: Vec<u32> = ids.iter().copied().take(t).collect();
    out.resize(t, filler);
    out
}

/// Mean squared error over the selected `(B*T, F)` rows only.
pub fn masked_mse(pred: &Tensor, target: &Tensor, rows: &[u32]) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::invalid("empty generation region"));
    }
    let f = pred.dim(D::Minus1)?;
    let n = pred.elem_count() / f;
    let idx = Tensor::new(rows, pred.device())?;
    let p = pred.reshape((n, f))?.index_select(&idx, 0)?;
    let t = target.reshape((n, f))?.index_select(&idx, 0)?;
    Ok((p - t)?.sqr()?.mean_all()?)
}
