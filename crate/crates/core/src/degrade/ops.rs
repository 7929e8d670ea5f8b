use rustfft::{num_complex::Complex64, FftPlanner};

use crate::audio::AudioBuffer;
use crate::dsp::resample;
use crate::error::{Error, Result};

/// Peak the mixture is scaled to when it would otherwise exceed full scale.
pub const MIX_PEAK_GUARD: f64 = 0.95;

/// Kernels below this many multiply-adds are convolved directly.
const DIRECT_CONV_LIMIT: usize = 1 << 21;

fn check_rates(a: &AudioBuffer, b: &AudioBuffer) -> Result<()> {
    if a.sample_rate != b.sample_rate {
        return Err(Error::SampleRateMismatch {
            expected: a.sample_rate,
            got: b.sample_rate,
        });
    }
    Ok(())
}

/// Full linear convolution truncated to `x.len()`.
pub fn convolve_truncated(x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 || h.is_empty() {
        return vec![0.0; n];
    }
    if n * h.len() <= DIRECT_CONV_LIMIT {
        let mut y = vec![0.0; n];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (j, &hj) in h.iter().take(n - i).enumerate() {
                y[i + j] += xi * hj;
            }
        }
        return y;
    }
    let size = (n + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut a: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    a.resize(size, Complex64::new(0.0, 0.0));
    let mut b: Vec<Complex64> = h.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    b.resize(size, Complex64::new(0.0, 0.0));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    a.iter().take(n).map(|c| c.re / size as f64).collect()
}

/// Convolve with an RIR, truncate to the input length, and rescale so the
/// output RMS equals the input RMS.
pub fn apply_reverb(clean: &AudioBuffer, rir: &AudioBuffer) -> Result<AudioBuffer> {
    check_rates(clean, rir)?;
    if rir.is_empty() {
        return Err(Error::invalid("empty RIR"));
    }
    let wet = AudioBuffer::new(convolve_truncated(&clean.samples, &rir.samples), clean.sample_rate)?;
    let (rms_in, rms_out) = (clean.rms(), wet.rms());
    if rms_out == 0.0 || rms_in == rms_out {
        return Ok(wet);
    }
    Ok(wet.scaled(rms_in / rms_out))
}

/// Hard clip at `threshold * peak(|audio|)`. Silent input is returned unchanged.
pub fn apply_clip(audio: &AudioBuffer, threshold: f64) -> Result<AudioBuffer> {
    if !(0.05..=0.9).contains(&threshold) {
        return Err(Error::invalid(format!("clip threshold {threshold} outside [0.05, 0.9]")));
    }
    let peak = audio.peak();
    if peak == 0.0 {
        return Ok(audio.clone());
    }
    let level = threshold * peak;
    AudioBuffer::new(
        audio.samples.iter().map(|s| s.clamp(-level, level)).collect(),
        audio.sample_rate,
    )
}

/// Simulate a low native sample rate: resample down to `bandwidth_hz` and
/// back, then fix the length to match the input exactly.
pub fn apply_bandlimit(audio: &AudioBuffer, bandwidth_hz: u32) -> Result<AudioBuffer> {
    if bandwidth_hz >= audio.sample_rate {
        log::warn!(
            "bandlimit to {bandwidth_hz} Hz is a no-op at {} Hz",
            audio.sample_rate
        );
        return Ok(audio.clone());
    }
    let low = resample(audio, bandwidth_hz)?;
    Ok(resample(&low, audio.sample_rate)?.fit_length(audio.len()))
}

#[derive(Debug, Clone)]
pub struct MixResult {
    pub audio: AudioBuffer,
    /// Noise scale giving the requested SNR.
    pub alpha: f64,
    /// Post-mix gain applied by the peak guard (1 when not triggered).
    pub gain: f64,
}

/// `speech + alpha * noise` with alpha chosen so the mean-square SNR equals
/// `snr_db`. The noise is looped or trimmed to the speech length. If the
/// mixture exceeds full scale it is scaled to a 0.95 peak.
pub fn mix_noise(speech: &AudioBuffer, noise: &AudioBuffer, snr_db: f64) -> Result<MixResult> {
    check_rates(speech, noise)?;
    if noise.is_empty() {
        return Err(Error::invalid("empty noise"));
    }
    let looped: Vec<f64> = noise.samples.iter().copied().cycle().take(speech.len()).collect();
    let p_speech = speech.power();
    let p_noise = looped.iter().map(|s| s * s).sum::<f64>() / looped.len().max(1) as f64;
    if p_speech == 0.0 {
        return Err(Error::invalid("speech has zero power"));
    }
    if p_noise == 0.0 {
        return Err(Error::invalid("noise has zero power"));
    }
    let alpha = (p_speech / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let mixed = AudioBuffer::new(
        speech
            .samples
            .iter()
            .zip(&looped)
            .map(|(s, n)| s + alpha * n)
            .collect(),
        speech.sample_rate,
    )?;
    let peak = mixed.peak();
    let (audio, gain) = if peak > 1.0 {
        let g = MIX_PEAK_GUARD / peak;
        (mixed.scaled(g), g)
    } else {
        (mixed, 1.0)
    };
    Ok(MixResult { audio, alpha, gain })
}
