use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::assemble::{assemble_inference, InferenceLayout, MAX_PROMPT_S};
use super::solver::{cfg_combine, ode_solve, sway_times, OdeMethod};
use crate::audio::{AudioBuffer, ACOUSTIC_RATE_HZ, TOKEN_RATE_HZ};
use crate::dsp::{mel_spectrogram, resample, MelConfig, MelSpectrogram, Vocoder};
use crate::error::{Error, Result};
use crate::fmse::{gaussian, ConditionBundle, Fmse};
use crate::saslm::Saslm;
use crate::tokenizer::{SemanticTokenSeq, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSettings {
    pub nfe: usize,
    pub cfg_strength: f64,
    pub sway: f64,
    pub method: OdeMethod,
    pub seed: u64,
}

impl Default for FlowSettings {
    fn default() -> Self {
        Self {
            nfe: 8,
            cfg_strength: 0.5,
            sway: -1.0,
            method: OdeMethod::Euler,
            seed: 0,
        }
    }
}

impl FlowSettings {
    pub fn validate(&self) -> Result<()> {
        if self.nfe == 0 {
            return Err(Error::invalid("nfe must be at least 1"));
        }
        if !(self.cfg_strength >= 0.0) {
            return Err(Error::invalid("cfg strength must be non-negative"));
        }
        if !(-1.0..=0.0).contains(&self.sway) {
            return Err(Error::invalid("sway coefficient must lie in [-1, 0]"));
        }
        Ok(())
    }
}

/// Guided velocity at one state. With `gamma == 0` only the conditional
/// branch is evaluated.
pub fn cfg_velocity(
    model: &Fmse,
    x_t: &Array2<f64>,
    cond: &ConditionBundle,
    uncond: &ConditionBundle,
    t: f64,
    gamma: f64,
) -> Result<Array2<f64>> {
    if gamma == 0.0 {
        return model.velocity(x_t, cond, t);
    }
    let mut v = model.velocity_batch(&[x_t, x_t], &[cond, uncond], t)?;
    let vu = v.pop().expect("two outputs");
    let vc = v.pop().expect("two outputs");
    Ok(cfg_combine(&vc, &vu, gamma))
}

/// Solve the flow from seeded noise and return the normalized generation region.
pub fn generate_mel(model: &Fmse, bundle: &ConditionBundle, layout: InferenceLayout, settings: &FlowSettings) -> Result<Array2<f64>> {
    settings.validate()?;
    let times = sway_times(settings.nfe, settings.sway)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let x0 = gaussian(&mut rng, model.cfg.n_mels, layout.total());
    let uncond = bundle.unconditional(model.cfg.filler());
    let x1 = ode_solve(
        |x, t| cfg_velocity(model, x, bundle, &uncond, t, settings.cfg_strength),
        &x0,
        &times,
        settings.method,
    )?;
    layout.extract(&x1)
}

/// Raw acoustic log-mel (`F x T`) of audio at any supported rate.
pub fn acoustic_mel(audio: &AudioBuffer) -> Result<Array2<f64>> {
    Ok(mel_spectrogram(&resample(audio, ACOUSTIC_RATE_HZ)?, &MelConfig::acoustic())?.values)
}

/// Infill the clean mel for `degraded_mel` (raw log-mel) given tokens and an
/// optional prompt. Returns the raw log-mel of the generation region.
pub fn infill(
    model: &Fmse,
    degraded_mel: &Array2<f64>,
    tokens: &[u32],
    prompt: Option<(&Array2<f64>, &[u32])>,
    no_semantic: bool,
    settings: &FlowSettings,
) -> Result<Array2<f64>> {
    let norm = model.norm;
    let filler = model.cfg.filler();
    let prompt_norm = prompt.map(|(m, _)| norm.apply(m));
    let max_prompt = MelConfig::acoustic().frames_for((MAX_PROMPT_S * ACOUSTIC_RATE_HZ as f64) as usize).unwrap_or(0);
    let (mut bundle, layout) = assemble_inference(
        prompt_norm.as_ref(),
        prompt.map_or(&[][..], |p| p.1),
        &norm.apply(degraded_mel),
        tokens,
        filler,
        max_prompt,
    )?;
    if no_semantic {
        bundle = bundle.without_semantics(filler);
    }
    Ok(norm.invert(&generate_mel(model, &bundle, layout, settings)?))
}

#[derive(Debug, Clone)]
pub struct EnhanceRequest {
    pub degraded: AudioBuffer,
    pub prompt: Option<AudioBuffer>,
    pub settings: FlowSettings,
    pub no_semantic: bool,
    pub no_prompt_tokens: bool,
}

impl EnhanceRequest {
    pub fn new(degraded: AudioBuffer) -> Self {
        Self {
            degraded,
            prompt: None,
            settings: FlowSettings::default(),
            no_semantic: false,
            no_prompt_tokens: false,
        }
    }
}

pub struct Models<'a> {
    pub saslm: &'a Saslm,
    pub fmse: &'a Fmse,
    /// Tokenizes the clean prompt.
    pub tokenizer: &'a dyn Tokenizer,
}

#[derive(Debug, Clone)]
pub struct EnhanceOutput {
    pub audio: AudioBuffer,
    /// Raw log-mel of the enhanced speech, `F x T1`.
    pub mel: MelSpectrogram,
    pub purified: SemanticTokenSeq,
    pub flow_time: Duration,
}

/// Full pipeline: purify tokens from the degraded audio, infill the clean
/// mel, vocode. Output has the input's duration at 24 kHz.
pub fn enhance(req: &EnhanceRequest, models: &Models, vocoder: &dyn Vocoder) -> Result<EnhanceOutput> {
    req.settings.validate()?;
    let purified = models.saslm.purify(&req.degraded)?;
    if purified.is_empty() {
        log::warn!("language model produced no tokens; continuing with filler only");
    }
    let degraded_mel = acoustic_mel(&req.degraded)?;
    let prompt = match &req.prompt {
        Some(p) => {
            if p.duration_s() > MAX_PROMPT_S + 1e-9 {
                return Err(Error::invalid(format!(
                    "prompt of {:.2} s exceeds the {MAX_PROMPT_S} s cap",
                    p.duration_s()
                )));
            }
            let toks = if req.no_prompt_tokens {
                Vec::new()
            } else {
                models.tokenizer.tokenize(&resample(p, TOKEN_RATE_HZ)?)?.ids
            };
            Some((acoustic_mel(p)?, toks))
        }
        None => None,
    };
    let started = Instant::now();
    let mel = infill(
        models.fmse,
        &degraded_mel,
        &purified.ids,
        prompt.as_ref().map(|(m, t)| (m, t.as_slice())),
        req.no_semantic,
        &req.settings,
    )?;
    let flow_time = started.elapsed();
    let acoustic = MelConfig::acoustic();
    let mel = MelSpectrogram {
        values: mel,
        config_id: acoustic.name.clone(),
    };
    let out_len = (req.degraded.duration_s() * ACOUSTIC_RATE_HZ as f64).round() as usize;
    let audio = vocoder.vocode(&mel, &acoustic)?.fit_length(out_len);
    Ok(EnhanceOutput {
        audio,
        mel,
        purified,
        flow_time,
    })
}
