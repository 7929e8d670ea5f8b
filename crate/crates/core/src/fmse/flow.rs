use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::condition::{net_inputs, tensor_to_mels, Ablation, ConditionBundle, MelNorm};
use super::masks::{sample_masks, MaskConfig, MaskSpec};
use super::model::{masked_mse, Fmse, NetInputs};
use crate::error::{Error, Result};
use crate::nn::{CResult, OptimConfig};

/// Raw (unnormalized) log-mels of a pair plus the clean-speech tokens.
#[derive(Debug, Clone)]
pub struct FmseExample {
    /// `F x T`.
    pub clean: Array2<f64>,
    pub degraded: Array2<f64>,
    pub tokens: Vec<u32>,
}

/// One fully specified training draw, in normalized mel space.
#[derive(Debug, Clone)]
pub struct FlowItem {
    pub x0: Array2<f64>,
    pub x1: Array2<f64>,
    pub y: Array2<f64>,
    pub tokens: Vec<u32>,
    pub masks: MaskSpec,
    pub t: f64,
}

pub struct FlowBatch {
    pub inputs: NetInputs,
    /// `(B, T, F)` velocity target `x1 - x0`.
    pub target: Tensor,
    /// Flattened `(b, frame)` indices of the generation region.
    pub rows: Vec<u32>,
}

pub fn build_flow_batch(model_cfg: &super::FmseConfig, items: &[FlowItem], ablation: Ablation, dtype: DType) -> Result<FlowBatch> {
    let filler = model_cfg.filler();
    let mut x_ts = Vec::with_capacity(items.len());
    let mut targets = Vec::with_capacity(items.len());
    let mut bundles = Vec::with_capacity(items.len());
    let t_max = items.iter().map(|i| i.x1.ncols()).max().unwrap_or(0);
    let mut rows = Vec::new();
    for (b, it) in items.iter().enumerate() {
        let mut masks = it.masks.clone();
        if ablation.no_degrad_mask {
            masks.m2.iter_mut().for_each(|k| *k = true);
        }
        if masks.m1.iter().all(|&k| k) {
            return Err(Error::invalid("mask leaves no generation region"));
        }
        let mut bundle = ConditionBundle::from_masks(&it.x1, &it.y, &it.tokens, &masks, filler)?;
        if ablation.no_semantic {
            bundle = bundle.without_semantics(filler);
        }
        let s = super::flow_interpolate(&it.x0, &it.x1, it.t)?;
        rows.extend(masks.m1.iter().enumerate().filter(|(_, &k)| !k).map(|(j, _)| (b * t_max + j) as u32));
        x_ts.push(s.x_t);
        targets.push(s.v_target);
        bundles.push(bundle);
    }
    let ts: Vec<f64> = items.iter().map(|i| i.t).collect();
    let inputs = net_inputs(
        model_cfg,
        &x_ts.iter().collect::<Vec<_>>(),
        &bundles.iter().collect::<Vec<_>>(),
        &ts,
        dtype,
    )?;
    // Reuse the state packing for the target.
    let target = net_inputs(
        model_cfg,
        &targets.iter().collect::<Vec<_>>(),
        &bundles.iter().collect::<Vec<_>>(),
        &ts,
        dtype,
    )?
    .x_t;
    Ok(FlowBatch { inputs, target, rows })
}

/// Mean squared velocity error over the generation frames of a batch.
pub fn cfm_loss<V>(velocity: V, batch: &FlowBatch) -> Result<Tensor>
where
    V: Fn(&NetInputs) -> CResult<Tensor>,
{
    let pred = velocity(&batch.inputs)?;
    masked_mse(&pred, &batch.target, &batch.rows)
}

pub fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Draw `t`, `x0` and masks for a normalized example.
pub fn sample_flow_item<R: Rng>(rng: &mut R, x1: &Array2<f64>, y: &Array2<f64>, tokens: &[u32], masks: &MaskConfig) -> Result<FlowItem> {
    let t = rng.random::<f64>();
    let x0 = gaussian(rng, x1.nrows(), x1.ncols());
    let masks = sample_masks(rng, x1.ncols(), masks)?;
    Ok(FlowItem {
        x0,
        x1: x1.clone(),
        y: y.clone(),
        tokens: tokens.to_vec(),
        masks,
        t,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FmseTrainConfig {
    pub optim: OptimConfig,
    pub masks: MaskConfig,
    pub ablation: Ablation,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowCurvePoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn write_flow_curve(path: impl AsRef<Path>, curve: &[FlowCurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Train the velocity network. A fresh model first fits its mel
/// normalization to the clean mels of `data`.
pub fn train_fmse(model: &mut Fmse, data: &[FmseExample], cfg: &FmseTrainConfig) -> Result<Vec<FlowCurvePoint>> {
    cfg.optim.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("empty training corpus"));
    }
    if model.steps_trained == 0 {
        model.norm = MelNorm::fit(&data.iter().map(|d| &d.clean).collect::<Vec<_>>())?;
    }
    let norm = model.norm;
    let normed: Vec<(Array2<f64>, Array2<f64>)> = data.iter().map(|d| (norm.apply(&d.clean), norm.apply(&d.degraded))).collect();
    let o = &cfg.optim;
    let mut opt = AdamW::new(
        model.store.all_vars(),
        ParamsAdamW {
            lr: o.lr_at(0),
            beta1: o.beta1,
            beta2: o.beta2,
            eps: 1e-8,
            weight_decay: o.weight_decay,
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut curve = Vec::with_capacity(o.steps);
    for step in 0..o.steps {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx: Vec<usize> = order[cursor..(cursor + o.batch_size).min(order.len())].to_vec();
        cursor += idx.len();
        let items: Vec<FlowItem> = idx
            .iter()
            .map(|&i| sample_flow_item(&mut rng, &normed[i].0, &normed[i].1, &data[i].tokens, &cfg.masks))
            .collect::<Result<_>>()?;
        let batch = build_flow_batch(&model.cfg, &items, cfg.ablation, model.dtype())?;
        let loss_t = cfm_loss(|inp| model.forward(inp), &batch)?;
        let loss = loss_t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("flow loss became {loss} at step {step}")));
        }
        let lr = o.lr_at(step);
        opt.set_learning_rate(lr);
        opt.backward_step(&loss_t)?;
        model.steps_trained += 1;
        curve.push(FlowCurvePoint { step, loss, lr });
    }
    Ok(curve)
}

impl Fmse {
    /// Velocities for a batch of normalized `F x T` states sharing one time.
    pub fn velocity_batch(&self, xs: &[&Array2<f64>], bundles: &[&ConditionBundle], t: f64) -> Result<Vec<Array2<f64>>> {
        let ts = vec![t; xs.len()];
        let inp = net_inputs(&self.cfg, xs, bundles, &ts, self.dtype())?;
        let v = self.forward(&inp)?;
        tensor_to_mels(&v, &xs.iter().map(|x| x.ncols()).collect::<Vec<_>>())
    }

    pub fn velocity(&self, x_t: &Array2<f64>, bundle: &ConditionBundle, t: f64) -> Result<Array2<f64>> {
        Ok(self.velocity_batch(&[x_t], &[bundle], t)?.remove(0))
    }
}
