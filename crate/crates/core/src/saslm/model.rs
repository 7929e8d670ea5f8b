use candle_core::{DType, Device, IndexOp, Module, Tensor, D};
use candle_nn::{Embedding, Init, Linear};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{pack_sequence, SaslmSequence, Slot, VocabLayout};
use crate::audio::{AudioBuffer, TOKEN_RATE_HZ};
use crate::dsp::{resample, MelConfig};
use crate::error::{Error, Result};
use crate::nn::{causal_mask, linear, log_softmax_last, Block, CResult, LayerNorm, ParamStore, Rotary};
use crate::tokenizer::{frame_features, SemanticTokenSeq, TokenSource};

/// Log-mel input affine: `(x - MEL_CENTER) / MEL_SCALE`.
const MEL_CENTER: f64 = -6.0;
const MEL_SCALE: f64 = 3.0;
/// Generation cap relative to the prefix length.
pub const MAX_LEN_RATIO: f64 = 1.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaslmConfig {
    /// Semantic vocabulary size `K`.
    pub k: usize,
    pub n_mels: usize,
    pub hidden: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub mlp_ratio: usize,
    /// Longest packed sequence the rotary tables cover.
    pub max_positions: usize,
}

impl SaslmConfig {
    pub fn small(k: usize) -> Self {
        Self {
            k,
            n_mels: 80,
            hidden: 256,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 4,
            mlp_ratio: 4,
            max_positions: 4096,
        }
    }

    pub fn layout(&self) -> VocabLayout {
        VocabLayout::new(self.k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.hidden == 0 || self.heads == 0 || self.n_mels == 0 {
            return Err(Error::Config("saslm dimensions must be positive".into()));
        }
        if self.hidden % self.heads != 0 || (self.hidden / self.heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "saslm hidden {} must split into {} even-width heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let h = self.hidden;
        let r = self.mlp_ratio * h;
        let v = self.layout().size();
        let block = 4 * h + (3 * h * h + 3 * h) + (h * h + h) + (h * r + r) + (r * h + h);
        let encoder = (3 * self.n_mels * h + h) + self.encoder_layers * block + 2 * h;
        let adapter = 2 * (h * h + h);
        let decoder = v * h + self.decoder_layers * block + 2 * h + (h * v + v);
        encoder + adapter + decoder
    }
}

/// Frame-level encoder over tokenizer-profile log-mels. The input projection
/// sees three neighbouring frames; the frames already run at the token rate so
/// no further downsampling happens.
#[derive(Debug, Clone)]
struct AudioEncoder {
    input: Linear,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

#[derive(Debug, Clone)]
struct Adapter {
    fc1: Linear,
    fc2: Linear,
}

impl Module for Adapter {
    fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    embed: Embedding,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
}

/// Which parameters a parameter name belongs to.
pub const ENCODER_PREFIX: &str = "encoder.";
pub const ADAPTER_PREFIX: &str = "adapter.";
pub const DECODER_PREFIX: &str = "decoder.";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64, top_k: usize },
}

pub struct Saslm {
    pub cfg: SaslmConfig,
    pub store: ParamStore,
    pub steps_trained: u64,
    encoder: AudioEncoder,
    adapter: Adapter,
    decoder: Decoder,
    rope: Rotary,
    dtype: DType,
    device: Device,
}

impl Saslm {
    pub fn new(cfg: SaslmConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let device = Device::Cpu;
        let store = ParamStore::new(seed);
        let vb = store.builder(dtype, &device);
        let h = cfg.hidden;
        let venc = vb.pp("encoder");
        let encoder = AudioEncoder {
            input: linear(3 * cfg.n_mels, h, venc.pp("input"))?,
            blocks: (0..cfg.encoder_layers)
                .map(|i| Block::new(h, cfg.heads, cfg.mlp_ratio, venc.pp(format!("block{i}"))))
                .collect::<CResult<_>>()?,
            norm: LayerNorm::new(h, venc.pp("norm"))?,
        };
        let vad = vb.pp("adapter");
        let adapter = Adapter {
            fc1: linear(h, h, vad.pp("fc1"))?,
            fc2: linear(h, h, vad.pp("fc2"))?,
        };
        let vdec = vb.pp("decoder");
        let v = cfg.layout().size();
        let table = vdec.pp("embed").get_with_hints((v, h), "weight", Init::Randn { mean: 0.0, stdev: 1.0 })?;
        let decoder = Decoder {
            embed: Embedding::new(table, h),
            blocks: (0..cfg.decoder_layers)
                .map(|i| Block::new(h, cfg.heads, cfg.mlp_ratio, vdec.pp(format!("block{i}"))))
                .collect::<CResult<_>>()?,
            norm: LayerNorm::new(h, vdec.pp("norm"))?,
            head: linear(h, v, vdec.pp("head"))?,
        };
        let rope = Rotary::new(h / cfg.heads, cfg.max_positions, dtype, &device)?;
        Ok(Self {
            cfg,
            store,
            steps_trained: 0,
            encoder,
            adapter,
            decoder,
            rope,
            dtype,
            device,
        })
    }

    pub fn layout(&self) -> VocabLayout {
        self.cfg.layout()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Tokenizer-profile log-mel frames (`n x n_mels`) of any-rate audio.
    pub fn features(audio: &AudioBuffer) -> Result<Array2<f64>> {
        let a16 = resample(audio, TOKEN_RATE_HZ)?;
        let mel = MelConfig::tokenizer();
        if a16.len() < mel.win {
            return Err(Error::InputTooShort {
                needed: mel.win,
                got: a16.len(),
            });
        }
        frame_features(&a16, &mel)
    }

    /// Features to a `(1, n, n_mels)` tensor in the model dtype.
    pub fn features_tensor(&self, feats: &Array2<f64>) -> Result<Tensor> {
        let (n, f) = feats.dim();
        if f != self.cfg.n_mels {
            return Err(Error::Shape(format!("expected {} mel bins, got {f}", self.cfg.n_mels)));
        }
        let data: Vec<f64> = feats.iter().map(|v| (v - MEL_CENTER) / MEL_SCALE).collect();
        Ok(Tensor::from_vec(data, (1, n, f), &self.device)?.to_dtype(self.dtype)?)
    }

    /// Encoder body: `(B, n, n_mels)` normalized features to `(B, n, H)`.
    pub fn encode(&self, feats: &Tensor) -> CResult<Tensor> {
        let n = feats.dim(1)?;
        let padded = feats.pad_with_zeros(1, 1, 1)?;
        let stacked = Tensor::cat(&[padded.narrow(1, 0, n)?, padded.narrow(1, 1, n)?, padded.narrow(1, 2, n)?], D::Minus1)?;
        let mut x = self.encoder.input.forward(&stacked)?;
        for b in &self.encoder.blocks {
            x = b.forward(&x, &self.rope, None)?;
        }
        self.encoder.norm.forward(&x)
    }

    pub fn adapt(&self, encoded: &Tensor) -> CResult<Tensor> {
        self.adapter.forward(encoded)
    }

    /// Continuous prefix embeddings (`n x H`) for audio at any supported rate.
    pub fn encoder_forward(&self, audio: &AudioBuffer) -> Result<Tensor> {
        let feats = self.features_tensor(&Self::features(audio)?)?;
        Ok(self.adapt(&self.encode(&feats)?)?.squeeze(0)?)
    }

    pub fn token_embeddings(&self, ids: &[u32]) -> CResult<Tensor> {
        let idx = Tensor::new(ids, &self.device)?;
        self.decoder.embed.forward(&idx)
    }

    /// Input rows (`L x H`) for a packed sequence with its prefix injected.
    pub fn embed_sequence(&self, seq: &SaslmSequence, prefix: &Tensor) -> Result<Tensor> {
        let (n, _) = seq.unpack();
        if prefix.dim(0)? != n {
            return Err(Error::Shape(format!("prefix has {} rows, sequence expects {n}", prefix.dim(0)?)));
        }
        let ids: Vec<u32> = seq
            .slots
            .iter()
            .filter_map(|s| match s {
                Slot::Token(id) => Some(*id),
                Slot::Embedding(_) => None,
            })
            .collect();
        let tok = self.token_embeddings(&ids)?;
        // ids are SOS, TOT, targets..., EOS
        let parts = [tok.narrow(0, 0, 1)?, prefix.clone(), tok.narrow(0, 1, ids.len() - 1)?];
        Ok(Tensor::cat(&parts, 0)?)
    }

    /// Causal decoder over `(B, L, H)` inputs, returning `(B, L, V)` logits.
    pub fn decode(&self, x: &Tensor) -> CResult<Tensor> {
        let l = x.dim(1)?;
        let mask = causal_mask(l, self.dtype, &self.device)?;
        let mut x = x.clone();
        for b in &self.decoder.blocks {
            x = b.forward(&x, &self.rope, Some(&mask))?;
        }
        self.decoder.head.forward(&self.decoder.norm.forward(&x)?)
    }

    /// Generate purified tokens from prefix embeddings (`n x H`). Emits at
    /// most `max_len` ids; `EOS` ends generation and is not returned.
    pub fn generate(&self, prefix: &Tensor, max_len: usize, mode: DecodeMode, seed: u64) -> Result<SemanticTokenSeq> {
        let layout = self.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = Tensor::cat(
            &[
                self.token_embeddings(&[layout.sos()])?,
                prefix.clone(),
                self.token_embeddings(&[layout.tot()])?,
            ],
            0,
        )?;
        let mut ids: Vec<u32> = Vec::new();
        while ids.len() < max_len {
            let x = if ids.is_empty() {
                head.clone()
            } else {
                Tensor::cat(&[head.clone(), self.token_embeddings(&ids)?], 0)?
            };
            let l = x.dim(0)?;
            let logits = self.decode(&x.unsqueeze(0)?)?.i((0, l - 1))?;
            let logits: Vec<f64> = logits.to_dtype(DType::F64)?.to_vec1()?;
            // Reserved ids other than EOS are never valid outputs.
            let allowed = layout.k + 1;
            let next = match mode {
                DecodeMode::Greedy => argmax(&logits[..layout.k], logits[layout.k + 2]),
                DecodeMode::Sample { temperature, top_k } => {
                    let mut cand: Vec<(u32, f64)> = (0..allowed)
                        .map(|i| {
                            let id = if i == layout.k { layout.eos() } else { i as u32 };
                            (id, logits[id as usize] / temperature.max(1e-6))
                        })
                        .collect();
                    cand.sort_by(|a, b| b.1.total_cmp(&a.1));
                    cand.truncate(top_k.clamp(1, allowed));
                    let max = cand[0].1;
                    let weights: Vec<f64> = cand.iter().map(|c| (c.1 - max).exp()).collect();
                    let total: f64 = weights.iter().sum();
                    let mut r = rng.random::<f64>() * total;
                    let mut pick = cand[cand.len() - 1].0;
                    for (c, w) in cand.iter().zip(&weights) {
                        if r < *w {
                            pick = c.0;
                            break;
                        }
                        r -= w;
                    }
                    pick
                }
            };
            if next == layout.eos() {
                break;
            }
            ids.push(next);
        }
        Ok(SemanticTokenSeq {
            ids,
            frame_rate: MelConfig::tokenizer().frame_rate(),
            source: TokenSource::SaslmGenerated,
        })
    }

    /// Greedy purification of degraded audio with the default length cap.
    pub fn purify(&self, audio: &AudioBuffer) -> Result<SemanticTokenSeq> {
        let prefix = self.encoder_forward(audio)?;
        let n = prefix.dim(0)?;
        self.generate(&prefix, max_len_for(n), DecodeMode::Greedy, 0)
    }

    /// Logits `(L, V)` for one packed sequence.
    pub fn sequence_logits(&self, seq: &SaslmSequence, prefix: &Tensor) -> Result<Tensor> {
        let x = self.embed_sequence(seq, prefix)?;
        Ok(self.decode(&x.unsqueeze(0)?)?.squeeze(0)?)
    }

    pub fn pack(&self, n: usize, targets: &[u32]) -> Result<SaslmSequence> {
        pack_sequence(n, targets, &self.layout())
    }
}

/// Index of the best semantic logit, or `EOS` when its logit is higher.
fn argmax(semantic: &[f64], eos_logit: f64) -> u32 {
    let mut best = (semantic.len() as u32 + 2, eos_logit);
    for (i, &v) in semantic.iter().enumerate() {
        if v > best.1 {
            best = (i as u32, v);
        }
    }
    best.0
}

pub fn max_len_for(n: usize) -> usize {
    (MAX_LEN_RATIO * n as f64).ceil() as usize
}

/// Mean cross-entropy of `logits` rows (`N x V`) selected by `rows` against
/// `targets`. Rows outside the selection do not enter the graph at all.
pub fn masked_cross_entropy(logits: &Tensor, rows: &[u32], targets: &[u32]) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::invalid("loss mask is empty for every item"));
    }
    if rows.len() != targets.len() {
        return Err(Error::Shape(format!("{} rows vs {} targets", rows.len(), targets.len())));
    }
    let dev = logits.device();
    let picked = logits.index_select(&Tensor::new(rows, dev)?, 0)?;
    let logp = log_softmax_last(&picked)?;
    let tgt = Tensor::new(targets, dev)?.unsqueeze(1)?;
    let nll = logp.gather(&tgt, 1)?.neg()?;
    Ok(nll.mean_all()?)
}

/// Prediction rows and targets for a batch of packed sequences laid out as
/// consecutive `(L_b, V)` blocks: position `p - 1` predicts the id at `p`.
pub fn shifted_targets(seqs: &[&SaslmSequence], layout: &VocabLayout, padded_len: usize) -> (Vec<u32>, Vec<u32>) {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, s) in seqs.iter().enumerate() {
        let labels = s.labels(layout);
        for p in 1..s.len() {
            if s.loss_mask[p] {
                rows.push((b * padded_len + p - 1) as u32);
                targets.push(labels[p]);
            }
        }
    }
    (rows, targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::saslm::{batch_forward, train_phase, Phase, SaslmExample, SaslmTrainConfig};
    use crate::synth;

    fn tiny(k: usize) -> SaslmConfig {
        SaslmConfig {
            k,
            n_mels: 80,
            hidden: 32,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 2,
            mlp_ratio: 2,
            max_positions: 256,
        }
    }

    fn speech(seed: u64, dur: f64) -> AudioBuffer {
        synth::utterance(seed, synth::Speaker::from_seed(seed), dur, 16000).unwrap()
    }

    #[test]
    fn param_count_matches_formula() {
        for cfg in [tiny(16), SaslmConfig::small(64)] {
            let m = Saslm::new(cfg.clone(), 0, DType::F32).unwrap();
            assert_eq!(m.store.param_count(), cfg.param_count());
        }
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let v = 20;
        let logits = Tensor::zeros((6, v), DType::F64, &Device::Cpu).unwrap();
        let loss = masked_cross_entropy(&logits, &[0, 2, 5], &[1, 19, 3]).unwrap();
        let got = loss.to_scalar::<f64>().unwrap();
        assert!((got - (v as f64).ln()).abs() < 1e-4, "{got}");
    }

    #[test]
    fn confident_logits_approach_zero_loss() {
        let mut data = vec![0.0f64; 2 * 4];
        data[1] = 50.0;
        data[4 + 2] = 50.0;
        let logits = Tensor::from_vec(data, (2, 4), &Device::Cpu).unwrap();
        let loss = masked_cross_entropy(&logits, &[0, 1], &[1, 2]).unwrap();
        assert!(loss.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let logits = Tensor::zeros((3, 4), DType::F64, &Device::Cpu).unwrap();
        assert!(masked_cross_entropy(&logits, &[], &[]).is_err());
    }

    #[test]
    fn loss_ignores_unmasked_rows_exactly() {
        let m = Saslm::new(tiny(8), 1, DType::F64).unwrap();
        let prefix = m.encoder_forward(&speech(1, 0.2)).unwrap();
        let n = prefix.dim(0).unwrap();
        let seq = m.pack(n, &[1, 2, 3, 4]).unwrap();
        let logits = m.sequence_logits(&seq, &prefix).unwrap();
        let (rows, targets) = shifted_targets(&[&seq], &m.layout(), seq.len());
        let base = masked_cross_entropy(&logits, &rows, &targets).unwrap().to_scalar::<f64>().unwrap();

        // Perturb every row that is not selected.
        let (l, v) = logits.dims2().unwrap();
        let mut noise = vec![0.0f64; l * v];
        for r in 0..l {
            if !rows.contains(&(r as u32)) {
                for c in 0..v {
                    noise[r * v + c] = 1e3 * ((r * 31 + c * 7) % 13) as f64;
                }
            }
        }
        let perturbed = (logits.clone() + Tensor::from_vec(noise, (l, v), &Device::Cpu).unwrap()).unwrap();
        let again = masked_cross_entropy(&perturbed, &rows, &targets).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(base.to_bits(), again.to_bits());

        // Gradient w.r.t. the logits is exactly zero outside the mask.
        let var = candle_core::Var::from_tensor(&logits.detach()).unwrap();
        let loss = masked_cross_entropy(var.as_tensor(), &rows, &targets).unwrap();
        let grads = loss.backward().unwrap();
        let g: Vec<Vec<f64>> = grads.get(var.as_tensor()).unwrap().to_vec2().unwrap();
        for (r, row) in g.iter().enumerate() {
            let selected = rows.contains(&(r as u32));
            assert_eq!(row.iter().any(|&x| x != 0.0), selected, "row {r}");
        }
    }

    #[test]
    fn decoder_is_causal() {
        let m = Saslm::new(tiny(8), 2, DType::F64).unwrap();
        let x = Tensor::randn(0.0f64, 1.0, (1, 12, 32), &Device::Cpu).unwrap();
        let a = m.decode(&x).unwrap();
        let mut rows: Vec<Tensor> = (0..12).map(|i| x.i((.., i..i + 1, ..)).unwrap()).collect();
        rows[8] = (rows[8].clone() * 5.0).unwrap();
        rows[11] = rows[11].ones_like().unwrap();
        let b = m.decode(&Tensor::cat(&rows, 1).unwrap()).unwrap();
        let diff = |i: usize| {
            (a.i((0, i)).unwrap() - b.i((0, i)).unwrap())
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        for i in 0..8 {
            assert_eq!(diff(i), 0.0, "position {i}");
        }
        assert!(diff(8) > 0.0);
    }

    #[test]
    fn encoder_frame_count_and_determinism() {
        let m = Saslm::new(tiny(8), 3, DType::F32).unwrap();
        let x = speech(3, 1.0);
        let a = m.encoder_forward(&x).unwrap();
        assert_eq!(a.dims2().unwrap(), (49, 32));
        let b = m.encoder_forward(&x).unwrap();
        assert_eq!(a.to_vec2::<f32>().unwrap(), b.to_vec2::<f32>().unwrap());
        // the 24 kHz branch lands on the same frames
        let x24 = crate::dsp::resample(&x, 24000).unwrap();
        assert_eq!(m.encoder_forward(&x24).unwrap().dim(0).unwrap(), 49);
    }

    #[test]
    fn encoder_finite_on_square_wave() {
        let m = Saslm::new(tiny(8), 3, DType::F32).unwrap();
        let sq: Vec<f64> = (0..16000).map(|i| if (i / 40) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let e = m.encoder_forward(&AudioBuffer::new(sq, 16000).unwrap()).unwrap();
        assert!(e.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn generation_is_deterministic_and_capped() {
        let m = Saslm::new(tiny(8), 4, DType::F32).unwrap();
        let prefix = m.encoder_forward(&speech(4, 0.3)).unwrap();
        let n = prefix.dim(0).unwrap();
        let a = m.generate(&prefix, max_len_for(n), DecodeMode::Greedy, 0).unwrap();
        let b = m.generate(&prefix, max_len_for(n), DecodeMode::Greedy, 0).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= max_len_for(n));
        assert!(a.ids.iter().all(|&id| id < 8));
        assert!(m.generate(&prefix, 0, DecodeMode::Greedy, 0).unwrap().is_empty());
        let mode = DecodeMode::Sample {
            temperature: 1.0,
            top_k: 4,
        };
        let s1 = m.generate(&prefix, 6, mode, 9).unwrap();
        assert_eq!(s1, m.generate(&prefix, 6, mode, 9).unwrap());
        assert_eq!(max_len_for(49), 62);
        assert_eq!(max_len_for(4), 5);
    }

    /// Analytic gradient of the packed-sequence loss against central
    /// differences, in f64 on a 2-layer, 32-wide model.
    #[test]
    fn gradient_matches_finite_differences() {
        let m = Saslm::new(tiny(8), 5, DType::F64).unwrap();
        let feats = m.features_tensor(&Saslm::features(&speech(5, 0.12)).unwrap()).unwrap();
        let n = feats.dim(1).unwrap();
        let seq = m.pack(n, &[3, 1, 4, 1, 5]).unwrap();
        let loss_of = |m: &Saslm| -> Tensor {
            let prefix = m.adapt(&m.encode(&feats).unwrap()).unwrap().squeeze(0).unwrap();
            batch_forward(m, &[seq.clone()], &[prefix]).unwrap().loss
        };
        let grads = loss_of(&m).backward().unwrap();
        let names = [
            "encoder.input.weight",
            "encoder.block0.attn.qkv.weight",
            "adapter.fc1.weight",
            "decoder.block1.mlp.fc1.weight",
            "decoder.block0.attn.qkv.weight",
            "decoder.embed.weight",
            "decoder.head.bias",
        ];
        for (j, name) in names.iter().enumerate() {
            let var = m.store.var(name).unwrap();
            let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let orig = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            // largest-gradient entry plus a fixed pseudo-random one
            let big = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap();
            for idx in [big, (j * 7919 + 13) % g.len()] {
                let eps = 1e-5;
                let eval = |delta: f64| {
                    let mut w = orig.clone();
                    w[idx] += delta;
                    var.set(&Tensor::from_vec(w, var.shape(), &Device::Cpu).unwrap()).unwrap();
                    loss_of(&m).to_scalar::<f64>().unwrap()
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                var.set(&Tensor::from_vec(orig.clone(), var.shape(), &Device::Cpu).unwrap()).unwrap();
                let denom = fd.abs().max(g[idx].abs()).max(1e-6);
                let rel = (fd - g[idx]).abs() / denom;
                if g[idx].abs() > 1e-7 {
                    assert!(rel < 1e-3, "{name}[{idx}]: analytic {} vs fd {fd} (rel {rel})", g[idx]);
                } else {
                    assert!(fd.abs() < 1e-6, "{name}[{idx}]: fd {fd} with zero analytic gradient");
                }
            }
        }
    }

    fn snapshot(m: &Saslm, prefix: &str) -> Vec<(String, Vec<f32>)> {
        m.store
            .named_tensors()
            .into_iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, t)| (k, t.flatten_all().unwrap().to_vec1::<f32>().unwrap()))
            .collect()
    }

    #[test]
    fn phases_freeze_the_other_half() {
        let mut m = Saslm::new(tiny(8), 6, DType::F32).unwrap();
        let data: Vec<SaslmExample> = (0..2)
            .map(|i| SaslmExample {
                features: Saslm::features(&speech(i, 0.2)).unwrap(),
                targets: vec![1, 2, 3, i as u32],
            })
            .collect();
        let mut cfg = SaslmTrainConfig::default();
        cfg.optim.steps = 2;
        cfg.optim.warmup_steps = 1;
        cfg.optim.peak_lr = 1e-2;

        let enc = snapshot(&m, ENCODER_PREFIX);
        let dec = snapshot(&m, DECODER_PREFIX);
        train_phase(&mut m, &data, Phase::LmOnly, &cfg).unwrap();
        assert_eq!(enc, snapshot(&m, ENCODER_PREFIX));
        assert_ne!(dec, snapshot(&m, DECODER_PREFIX));

        let enc = snapshot(&m, ENCODER_PREFIX);
        let dec = snapshot(&m, DECODER_PREFIX);
        let ada = snapshot(&m, ADAPTER_PREFIX);
        train_phase(&mut m, &data, Phase::EncoderFinetune, &cfg).unwrap();
        assert_eq!(dec, snapshot(&m, DECODER_PREFIX));
        assert_eq!(ada, snapshot(&m, ADAPTER_PREFIX));
        assert_ne!(enc, snapshot(&m, ENCODER_PREFIX));
        assert_eq!(m.steps_trained, 4);
    }

    #[test]
    fn phase_parsing() {
        assert_eq!("lm".parse::<Phase>().unwrap(), Phase::LmOnly);
        assert_eq!("encoder_finetune".parse::<Phase>().unwrap(), Phase::EncoderFinetune);
        assert!("decoder".parse::<Phase>().is_err());
    }

    #[test]
    fn lr_schedule_warms_up_then_decays() {
        let o = crate::saslm::OptimConfig {
            peak_lr: 1.0,
            warmup_steps: 4,
            steps: 12,
            ..Default::default()
        };
        assert_eq!(o.lr_at(0), 0.25);
        assert_eq!(o.lr_at(3), 1.0);
        assert_eq!(o.lr_at(4), 1.0);
        assert_eq!(o.lr_at(8), 0.5);
        assert_eq!(o.lr_at(12), 0.0);
    }
}
