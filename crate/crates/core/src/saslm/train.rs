use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{masked_cross_entropy, shifted_targets, Saslm, ADAPTER_PREFIX, DECODER_PREFIX, ENCODER_PREFIX};
use super::vocab::SaslmSequence;
use crate::error::{Error, Result};
use crate::nn::OptimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Frozen encoder; adapter and decoder train.
    LmOnly,
    /// Frozen adapter and decoder; encoder trains at a reduced rate.
    EncoderFinetune,
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lm" | "lm_only" => Ok(Phase::LmOnly),
            "encoder" | "encoder_finetune" => Ok(Phase::EncoderFinetune),
            other => Err(Error::invalid(format!("unknown phase `{other}` (expected lm or encoder)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaslmTrainConfig {
    pub optim: OptimConfig,
    /// Encoder learning-rate multiplier during fine-tuning.
    pub encoder_lr_scale: f64,
    pub seed: u64,
    /// Stop once teacher-forced accuracy on a full pass reaches this value.
    pub stop_accuracy: Option<f64>,
}

impl Default for SaslmTrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            encoder_lr_scale: 0.1,
            seed: 0,
            stop_accuracy: None,
        }
    }
}

/// Degraded-audio features paired with the clean-speech token targets.
#[derive(Debug, Clone)]
pub struct SaslmExample {
    /// Tokenizer-profile log-mel frames, `n x n_mels`.
    pub features: Array2<f64>,
    pub targets: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

pub fn write_curve(path: impl AsRef<Path>, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Loss and teacher-forced accuracy of a batch.
pub struct BatchOutput {
    pub loss: Tensor,
    pub accuracy: f64,
}

/// Forward a batch given its prefixes (`n_b x H`, after the adapter).
/// Shorter sequences are right-padded with `PAD`, which the causal mask
/// keeps invisible to every real position.
pub fn batch_forward(model: &Saslm, seqs: &[SaslmSequence], prefixes: &[Tensor]) -> Result<BatchOutput> {
    let layout = model.layout();
    let h = model.cfg.hidden;
    let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let pad_row = model.token_embeddings(&[layout.pad()])?;
    let mut rows = Vec::with_capacity(seqs.len());
    for (s, p) in seqs.iter().zip(prefixes) {
        let x = model.embed_sequence(s, p)?;
        let extra = max_len - s.len();
        rows.push(if extra > 0 {
            Tensor::cat(&[x, pad_row.broadcast_as((extra, h))?.contiguous()?], 0)?
        } else {
            x
        });
    }
    let logits = model.decode(&Tensor::stack(&rows, 0)?)?;
    let v = logits.dim(D::Minus1)?;
    let flat = logits.reshape((seqs.len() * max_len, v))?;
    let refs: Vec<&SaslmSequence> = seqs.iter().collect();
    let (sel, targets) = shifted_targets(&refs, &layout, max_len);
    let loss = masked_cross_entropy(&flat, &sel, &targets)?;
    let pred: Vec<u32> = flat
        .index_select(&Tensor::new(sel.as_slice(), model.device())?, 0)?
        .argmax(D::Minus1)?
        .to_vec1()?;
    let correct = pred.iter().zip(&targets).filter(|(a, b)| a == b).count();
    Ok(BatchOutput {
        loss,
        accuracy: correct as f64 / targets.len() as f64,
    })
}

fn trainable(model: &Saslm, phase: Phase) -> Vec<Var> {
    match phase {
        Phase::LmOnly => {
            let mut v = model.store.vars_with_prefix(ADAPTER_PREFIX);
            v.extend(model.store.vars_with_prefix(DECODER_PREFIX));
            v
        }
        Phase::EncoderFinetune => model.store.vars_with_prefix(ENCODER_PREFIX),
    }
}

/// Run one training phase and return the per-step curve. Parameters outside
/// the phase's trainable set are never handed to the optimizer.
pub fn train_phase(model: &mut Saslm, data: &[SaslmExample], phase: Phase, cfg: &SaslmTrainConfig) -> Result<Vec<CurvePoint>> {
    cfg.optim.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("empty training corpus"));
    }
    let feats: Vec<Tensor> = data.iter().map(|d| model.features_tensor(&d.features)).collect::<Result<_>>()?;
    let seqs: Vec<SaslmSequence> = data
        .iter()
        .map(|d| model.pack(d.features.nrows(), &d.targets))
        .collect::<Result<_>>()?;
    // The frozen encoder's output never changes during lm_only.
    let cached: Option<Vec<Tensor>> = match phase {
        Phase::LmOnly => Some(
            feats
                .iter()
                .map(|f| Ok(model.encode(f)?.squeeze(0)?.detach()))
                .collect::<Result<_>>()?,
        ),
        Phase::EncoderFinetune => None,
    };
    let lr_scale = match phase {
        Phase::LmOnly => 1.0,
        Phase::EncoderFinetune => cfg.encoder_lr_scale,
    };
    let o = &cfg.optim;
    let mut opt = AdamW::new(
        trainable(model, phase),
        ParamsAdamW {
            lr: o.lr_at(0) * lr_scale,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: 1e-8,
            weight_decay: o.weight_decay,
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(o.steps);
    let mut cursor = order.len();
    let mut epoch_acc = (0usize, 0.0f64);
    for step in 0..o.steps {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx: Vec<usize> = order[cursor..(cursor + o.batch_size).min(order.len())].to_vec();
        cursor += idx.len();
        let mut prefixes = Vec::with_capacity(idx.len());
        for &i in &idx {
            let enc = match &cached {
                Some(c) => c[i].unsqueeze(0)?,
                None => model.encode(&feats[i])?,
            };
            prefixes.push(model.adapt(&enc)?.squeeze(0)?);
        }
        let batch: Vec<SaslmSequence> = idx.iter().map(|&i| seqs[i].clone()).collect();
        let out = batch_forward(model, &batch, &prefixes)?;
        let loss = out.loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("saslm loss became {loss} at step {step}")));
        }
        let lr = o.lr_at(step) * lr_scale;
        opt.set_learning_rate(lr);
        opt.backward_step(&out.loss)?;
        model.steps_trained += 1;
        curve.push(CurvePoint {
            step,
            loss,
            accuracy: out.accuracy,
            lr,
        });
        epoch_acc = (epoch_acc.0 + idx.len(), epoch_acc.1 + out.accuracy * idx.len() as f64);
        if cursor >= order.len() {
            let acc = epoch_acc.1 / epoch_acc.0 as f64;
            epoch_acc = (0, 0.0);
            if cfg.stop_accuracy.is_some_and(|t| acc >= t) {
                log::info!("saslm {phase:?}: accuracy {acc:.4} reached at step {step}");
                break;
            }
        }
    }
    Ok(curve)
}
