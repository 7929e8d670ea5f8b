use candle_core::{DType, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::masks::MaskSpec;
use super::model::{pad_tokens, FmseConfig, NetInputs};
use crate::error::{Error, Result};

/// Global affine normalization of log-mel values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelNorm {
    pub mean: f64,
    pub std: f64,
}

impl Default for MelNorm {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl MelNorm {
    pub fn fit(mels: &[&Array2<f64>]) -> Result<Self> {
        let n: usize = mels.iter().map(|m| m.len()).sum();
        if n == 0 {
            return Err(Error::invalid("cannot fit mel normalization on empty data"));
        }
        let mean = mels.iter().map(|m| m.sum()).sum::<f64>() / n as f64;
        let var = mels.iter().map(|m| m.iter().map(|v| (v - mean).powi(2)).sum::<f64>()).sum::<f64>() / n as f64;
        Ok(Self {
            mean,
            std: var.sqrt().max(1e-6),
        })
    }

    pub fn apply(&self, mel: &Array2<f64>) -> Array2<f64> {
        mel.mapv(|v| (v - self.mean) / self.std)
    }

    pub fn invert(&self, mel: &Array2<f64>) -> Array2<f64> {
        mel.mapv(|v| v * self.std + self.mean)
    }
}

/// Condition switches that reproduce the ablation arms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    /// Never mask the degraded condition.
    pub no_degrad_mask: bool,
    /// Replace every token with the filler.
    pub no_semantic: bool,
}

/// Everything the velocity network sees besides `x_t` and `t`. Mels are
/// normalized `F x T`; empty frames are zeros with a `false` validity flag.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    pub ctx_clean: Array2<f64>,
    pub clean_valid: Vec<bool>,
    pub ctx_degraded: Array2<f64>,
    pub degraded_valid: Vec<bool>,
    /// Filler-padded ids, one per frame.
    pub tokens: Vec<u32>,
}

fn masked(mel: &Array2<f64>, keep: &[bool]) -> Array2<f64> {
    let mut out = mel.clone();
    for (j, &k) in keep.iter().enumerate() {
        if !k {
            out.column_mut(j).fill(0.0);
        }
    }
    out
}

impl ConditionBundle {
    /// Training bundle `(m1 ⊙ x1, m2 ⊙ y, tokens)`; an unconditional draw drops
    /// the degraded mel and the tokens but keeps the clean context.
    pub fn from_masks(x1: &Array2<f64>, y: &Array2<f64>, tokens: &[u32], masks: &MaskSpec, filler: u32) -> Result<Self> {
        let t = x1.ncols();
        if y.dim() != x1.dim() || masks.m1.len() != t || masks.m2.len() != t {
            return Err(Error::Shape(format!(
                "clean {:?}, degraded {:?}, masks {}/{}",
                x1.dim(),
                y.dim(),
                masks.m1.len(),
                masks.m2.len()
            )));
        }
        let b = Self {
            ctx_clean: masked(x1, &masks.m1),
            clean_valid: masks.m1.clone(),
            ctx_degraded: masked(y, &masks.m2),
            degraded_valid: masks.m2.clone(),
            tokens: pad_tokens(tokens, t, filler),
        };
        Ok(if masks.uncond { b.unconditional(filler) } else { b })
    }

    pub fn n_frames(&self) -> usize {
        self.tokens.len()
    }

    pub fn unconditional(&self, filler: u32) -> Self {
        Self {
            ctx_clean: self.ctx_clean.clone(),
            clean_valid: self.clean_valid.clone(),
            ctx_degraded: Array2::zeros(self.ctx_degraded.dim()),
            degraded_valid: vec![false; self.n_frames()],
            tokens: vec![filler; self.n_frames()],
        }
    }

    pub fn without_semantics(&self, filler: u32) -> Self {
        Self {
            tokens: vec![filler; self.n_frames()],
            ..self.clone()
        }
    }
}

/// `x_t = (1 - t) x0 + t x1`, target `x1 - x0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub t: f64,
    pub x0: Array2<f64>,
    pub x1: Array2<f64>,
    pub x_t: Array2<f64>,
    pub v_target: Array2<f64>,
}

pub fn flow_interpolate(x0: &Array2<f64>, x1: &Array2<f64>, t: f64) -> Result<FlowSample> {
    if x0.dim() != x1.dim() {
        return Err(Error::Shape(format!("x0 {:?} vs x1 {:?}", x0.dim(), x1.dim())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("flow time {t} outside [0, 1]")));
    }
    let x_t = if t == 0.0 {
        x0.clone()
    } else if t == 1.0 {
        x1.clone()
    } else {
        x0 * (1.0 - t) + x1 * t
    };
    Ok(FlowSample {
        t,
        x0: x0.clone(),
        x1: x1.clone(),
        x_t,
        v_target: x1 - x0,
    })
}

fn frames_tensor(mats: &[&Array2<f64>], t_max: usize, dtype: DType) -> Result<Tensor> {
    let f = mats[0].nrows();
    let mut data = vec![0.0f64; mats.len() * t_max * f];
    for (b, m) in mats.iter().enumerate() {
        for ((fi, ti), v) in m.indexed_iter() {
            data[(b * t_max + ti) * f + fi] = *v;
        }
    }
    Ok(Tensor::from_vec(data, (mats.len(), t_max, f), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

fn flag_tensor(flags: &[&[bool]], t_max: usize, dtype: DType) -> Result<Tensor> {
    let mut data = vec![0.0f64; flags.len() * t_max];
    for (b, fl) in flags.iter().enumerate() {
        for (ti, &v) in fl.iter().enumerate() {
            data[b * t_max + ti] = v as u8 as f64;
        }
    }
    Ok(Tensor::from_vec(data, (flags.len(), t_max, 1), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Stack states and bundles into network inputs. Items shorter than the
/// longest are padded at the end with empty frames and filler tokens.
pub fn net_inputs(cfg: &FmseConfig, x_t: &[&Array2<f64>], bundles: &[&ConditionBundle], ts: &[f64], dtype: DType) -> Result<NetInputs> {
    if x_t.is_empty() || x_t.len() != bundles.len() || ts.len() != x_t.len() {
        return Err(Error::invalid("net_inputs needs matching, non-empty batches"));
    }
    for (x, b) in x_t.iter().zip(bundles) {
        if x.nrows() != cfg.n_mels || x.ncols() != b.n_frames() || b.ctx_clean.dim() != x.dim() || b.ctx_degraded.dim() != x.dim() {
            return Err(Error::Shape(format!(
                "state {:?} does not match bundle of {} frames and {} mels",
                x.dim(),
                b.n_frames(),
                cfg.n_mels
            )));
        }
    }
    let t_max = x_t.iter().map(|x| x.ncols()).max().unwrap_or(0);
    let mut tokens = vec![cfg.filler(); bundles.len() * t_max];
    for (b, bd) in bundles.iter().enumerate() {
        tokens[b * t_max..b * t_max + bd.n_frames()].copy_from_slice(&bd.tokens);
    }
    let dev = candle_core::Device::Cpu;
    Ok(NetInputs {
        x_t: frames_tensor(x_t, t_max, dtype)?,
        ctx_clean: frames_tensor(&bundles.iter().map(|b| &b.ctx_clean).collect::<Vec<_>>(), t_max, dtype)?,
        clean_flag: flag_tensor(&bundles.iter().map(|b| b.clean_valid.as_slice()).collect::<Vec<_>>(), t_max, dtype)?,
        ctx_degraded: frames_tensor(&bundles.iter().map(|b| &b.ctx_degraded).collect::<Vec<_>>(), t_max, dtype)?,
        degraded_flag: flag_tensor(&bundles.iter().map(|b| b.degraded_valid.as_slice()).collect::<Vec<_>>(), t_max, dtype)?,
        tokens: Tensor::from_vec(tokens, (bundles.len(), t_max), &dev)?,
        t: Tensor::from_vec(ts.to_vec(), ts.len(), &dev)?.to_dtype(dtype)?,
    })
}

/// `(B, T, F)` tensor back to per-item `F x T` arrays of the given lengths.
pub fn tensor_to_mels(x: &Tensor, lens: &[usize]) -> Result<Vec<Array2<f64>>> {
    let (b, t_max, f) = x.dims3()?;
    if lens.len() != b {
        return Err(Error::Shape(format!("{b} items vs {} lengths", lens.len())));
    }
    let flat: Vec<f64> = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    Ok(lens
        .iter()
        .enumerate()
        .map(|(bi, &len)| Array2::from_shape_fn((f, len), |(fi, ti)| flat[(bi * t_max + ti) * f + fi]))
        .collect())
}
