use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degrade::DistortionProbs;
use crate::dsp::MelConfig;
use crate::error::{Error, Result};
use crate::fmse::{Ablation, FmseConfig, MaskConfig};
use crate::infer::{FlowSettings, SweepGrid};
use crate::nn::OptimConfig;
use crate::saslm::SaslmConfig;

/// Stage seed: first eight bytes (little endian) of
/// `sha256("<stage>:<global seed>")`.
pub fn derive_seed(global: u64, stage: &str) -> u64 {
    let digest = Sha256::digest(format!("{stage}:{global}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// Directory of clean mono WAVs. When unset a synthetic corpus is generated.
    pub clean_dir: Option<PathBuf>,
    pub n_utterances: usize,
    pub duration_s: f64,
    pub n_speakers: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    /// Directory with `noises/` and `rirs/`. When unset a seeded synthetic bank is used.
    pub asset_dir: Option<PathBuf>,
    /// Length of each synthetic noise bed.
    pub noise_s: f64,
    pub probs: DistortionProbs,
    /// Replace sampled recipes by additive noise only, at this SNR.
    pub noise_only_snr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSection {
    pub k: usize,
    pub mel: MelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaslmSection {
    pub model: SaslmConfig,
    pub lm: OptimConfig,
    pub encoder: OptimConfig,
    pub encoder_lr_scale: f64,
    pub stop_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FmseSection {
    pub model: FmseConfig,
    pub mel: MelConfig,
    pub optim: OptimConfig,
    pub masks: MaskConfig,
    pub ablation: Ablation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferSection {
    pub flow: FlowSettings,
    pub griffin_lim_iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub run_name: String,
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub simulate: SimulateConfig,
    pub tokenizer: TokenizerSection,
    pub saslm: SaslmSection,
    pub fmse: FmseSection,
    pub infer: InferSection,
    pub sweep: SweepGrid,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl PipelineConfig {
    /// Laptop-scale profile: eight one-second synthetic utterances and
    /// models that overfit them in a few minutes on one core.
    pub fn toy() -> Self {
        let k = 24;
        Self {
            run_name: "toy".into(),
            seed: 0,
            corpus: CorpusConfig {
                clean_dir: None,
                n_utterances: 8,
                duration_s: 1.0,
                n_speakers: 3,
            },
            simulate: SimulateConfig {
                asset_dir: None,
                noise_s: 2.0,
                probs: DistortionProbs::default(),
                noise_only_snr_db: Some(0.0),
            },
            tokenizer: TokenizerSection {
                k,
                mel: MelConfig::tokenizer(),
            },
            saslm: SaslmSection {
                model: SaslmConfig {
                    k,
                    n_mels: 80,
                    hidden: 64,
                    heads: 4,
                    encoder_layers: 1,
                    decoder_layers: 2,
                    mlp_ratio: 2,
                    max_positions: 512,
                },
                lm: OptimConfig {
                    peak_lr: 3e-3,
                    warmup_steps: 50,
                    steps: 2000,
                    batch_size: 8,
                    weight_decay: 0.0,
                    beta1: 0.9,
                    beta2: 0.98,
                },
                encoder: OptimConfig {
                    peak_lr: 3e-3,
                    warmup_steps: 10,
                    steps: 100,
                    batch_size: 8,
                    weight_decay: 0.0,
                    beta1: 0.9,
                    beta2: 0.98,
                },
                encoder_lr_scale: 0.1,
                stop_accuracy: Some(1.0),
            },
            fmse: FmseSection {
                model: FmseConfig {
                    k,
                    n_mels: 100,
                    hidden: 64,
                    heads: 4,
                    layers: 4,
                    mlp_ratio: 2,
                    token_dim: 32,
                    token_blocks: 2,
                    token_kernel: 7,
                    max_positions: 1024,
                },
                mel: MelConfig::acoustic(),
                optim: OptimConfig {
                    peak_lr: 2e-3,
                    warmup_steps: 100,
                    steps: 2000,
                    batch_size: 8,
                    weight_decay: 0.0,
                    beta1: 0.9,
                    beta2: 0.99,
                },
                masks: MaskConfig::default(),
                ablation: Ablation::default(),
            },
            infer: InferSection {
                flow: FlowSettings::default(),
                griffin_lim_iters: 32,
            },
            sweep: SweepGrid::default(),
        }
    }

    /// The small model profile: 256-wide transformers, random distortions.
    pub fn small() -> Self {
        let k = 128;
        let mut cfg = Self::toy();
        cfg.run_name = "small".into();
        cfg.corpus.n_utterances = 64;
        cfg.corpus.duration_s = 3.0;
        cfg.corpus.n_speakers = 8;
        cfg.simulate.noise_s = 10.0;
        cfg.simulate.noise_only_snr_db = None;
        cfg.tokenizer.k = k;
        cfg.saslm.model = SaslmConfig::small(k);
        cfg.saslm.lm = OptimConfig::default();
        cfg.saslm.encoder = OptimConfig::default();
        cfg.saslm.stop_accuracy = None;
        cfg.fmse.model = FmseConfig::small(k);
        cfg.fmse.optim = OptimConfig::default();
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) {
            return Err(Error::Config(format!("run_name `{}` must be a plain name", self.run_name)));
        }
        if self.corpus.clean_dir.is_none() && self.corpus.n_utterances == 0 {
            return Err(Error::Config("corpus.n_utterances must be positive".into()));
        }
        if !(self.corpus.duration_s > 0.0) || self.corpus.n_speakers == 0 {
            return Err(Error::Config("corpus needs duration_s > 0 and n_speakers > 0".into()));
        }
        self.simulate.probs.validate()?;
        self.tokenizer.mel.validate()?;
        self.fmse.mel.validate()?;
        let k = self.tokenizer.k;
        if self.saslm.model.k != k || self.fmse.model.k != k {
            return Err(Error::Config(format!(
                "vocabulary mismatch: tokenizer.k = {k}, saslm.model.k = {}, fmse.model.k = {}",
                self.saslm.model.k, self.fmse.model.k
            )));
        }
        if self.saslm.model.n_mels != self.tokenizer.mel.n_mels {
            return Err(Error::Config("saslm.model.n_mels must equal tokenizer.mel.n_mels".into()));
        }
        if self.fmse.model.n_mels != self.fmse.mel.n_mels {
            return Err(Error::Config("fmse.model.n_mels must equal fmse.mel.n_mels".into()));
        }
        // Feature extraction downstream is fixed to the built-in profiles.
        if self.tokenizer.mel != MelConfig::tokenizer() || self.fmse.mel != MelConfig::acoustic() {
            return Err(Error::Config(
                "mel profiles must match the built-in `tokenizer-16k` and `acoustic-24k` profiles".into(),
            ));
        }
        self.saslm.model.validate()?;
        self.fmse.model.validate()?;
        self.saslm.lm.validate()?;
        self.saslm.encoder.validate()?;
        self.fmse.optim.validate()?;
        self.infer.flow.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        for cfg in [PipelineConfig::toy(), PipelineConfig::small()] {
            let text = cfg.to_toml().unwrap();
            assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn missing_keys_take_defaults() {
        let cfg = PipelineConfig::from_toml("seed = 7\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.fmse, PipelineConfig::toy().fmse);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(PipelineConfig::from_toml("sede = 1\n"), Err(Error::Config(_))));
        let mut text = PipelineConfig::toy().to_toml().unwrap();
        text = text.replace("peak_lr", "peak_rate");
        assert!(PipelineConfig::from_toml(&text).is_err());
    }

    #[test]
    fn vocabulary_mismatch_rejected() {
        let mut cfg = PipelineConfig::toy();
        cfg.tokenizer.k = 32;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stage_seeds() {
        assert_eq!(derive_seed(0, "fm-train"), derive_seed(0, "fm-train"));
        assert_ne!(derive_seed(0, "fm-train"), derive_seed(1, "fm-train"));
        assert_ne!(derive_seed(0, "fm-train"), derive_seed(0, "saslm-train"));
    }
}
