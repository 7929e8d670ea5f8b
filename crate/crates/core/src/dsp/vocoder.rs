//! Mel-to-waveform inversion. Griffin-Lim stands in for a neural vocoder; the
//! [`Vocoder`] trait is the seam where one could be plugged in.

use nalgebra::DMatrix;
use ndarray::Array2;
use num_complex::Complex64;

use super::mel::{mel_filterbank, MelConfig, MelSpectrogram};
use super::stft::{istft, stft_samples};
use crate::audio::AudioBuffer;
use crate::error::{Error, Result};

/// Peak level of vocoder output.
pub const OUTPUT_PEAK: f64 = 0.95;
/// Reconstructions quieter than this are treated as silence and not normalized.
const SILENCE_PEAK: f64 = 1e-4;

pub trait Vocoder {
    fn vocode(&self, mel: &MelSpectrogram, cfg: &MelConfig) -> Result<AudioBuffer>;
}

#[derive(Debug, Clone)]
pub struct GriffinLim {
    pub n_iters: usize,
}

impl Default for GriffinLim {
    fn default() -> Self {
        Self { n_iters: 32 }
    }
}

impl Vocoder for GriffinLim {
    fn vocode(&self, mel: &MelSpectrogram, cfg: &MelConfig) -> Result<AudioBuffer> {
        griffin_lim(mel, cfg, self.n_iters)
    }
}

fn pinv_filterbank(cfg: &MelConfig) -> Result<Array2<f64>> {
    let fb = mel_filterbank(cfg);
    let (rows, cols) = fb.dim();
    let m = DMatrix::from_row_iterator(rows, cols, fb.iter().copied());
    let p = m
        .pseudo_inverse(1e-10)
        .map_err(|e| Error::Numerical(format!("filterbank pseudo-inverse: {e}")))?;
    Ok(Array2::from_shape_fn((cols, rows), |(i, j)| p[(i, j)]))
}

fn check_shape(mel: &MelSpectrogram, cfg: &MelConfig) -> Result<()> {
    if mel.n_mels() != cfg.n_mels {
        return Err(Error::Shape(format!(
            "mel has {} bands, profile `{}` expects {}",
            mel.n_mels(),
            cfg.name,
            cfg.n_mels
        )));
    }
    if mel.n_frames() == 0 {
        return Err(Error::Shape("mel has no frames".into()));
    }
    Ok(())
}

/// Griffin-Lim reconstruction without output normalization.
/// Length is `(frames - 1) * hop + win`.
pub fn griffin_lim_raw(mel: &MelSpectrogram, cfg: &MelConfig, n_iters: usize) -> Result<Vec<f64>> {
    check_shape(mel, cfg)?;
    if n_iters == 0 {
        return Err(Error::invalid("griffin_lim needs n_iters >= 1"));
    }
    let target = pinv_filterbank(cfg)?
        .dot(&mel.values.mapv(f64::exp))
        .mapv(|v| v.max(0.0));
    let mut spec = target.mapv(|m| Complex64::new(m, 0.0));
    let mut signal = istft(&spec, cfg)?;
    for _ in 0..n_iters {
        let rebuilt = stft_samples(&signal, cfg)?;
        ndarray::Zip::from(&mut spec)
            .and(&rebuilt)
            .and(&target)
            .for_each(|s, r, &m| {
                let n = r.norm();
                *s = if n > 1e-12 {
                    r * (m / n)
                } else {
                    Complex64::new(m, 0.0)
                };
            });
        signal = istft(&spec, cfg)?;
    }
    Ok(signal)
}

/// Griffin-Lim reconstruction peak-normalized to 0.95.
pub fn griffin_lim(mel: &MelSpectrogram, cfg: &MelConfig, n_iters: usize) -> Result<AudioBuffer> {
    let raw = AudioBuffer::new(griffin_lim_raw(mel, cfg, n_iters)?, cfg.sample_rate)?;
    if raw.peak() < SILENCE_PEAK {
        return Ok(raw);
    }
    Ok(raw.peak_normalized(OUTPUT_PEAK))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::mel_spectrogram;

    fn sine(freq: f64, len: usize) -> AudioBuffer {
        let s = (0..len)
            .map(|n| 0.8 * (2.0 * std::f64::consts::PI * freq * n as f64 / 24000.0).sin())
            .collect();
        AudioBuffer::new(s, 24000).unwrap()
    }

    fn mel_error_fraction(a: &MelSpectrogram, b: &MelSpectrogram, tol: f64) -> f64 {
        let n = a.values.len() as f64;
        a.values
            .iter()
            .zip(b.values.iter())
            .filter(|(x, y)| (*x - *y).abs() < tol)
            .count() as f64
            / n
    }

    /// Spectral convergence in the linear mel-magnitude domain.
    fn mel_convergence(a: &MelSpectrogram, b: &MelSpectrogram) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            num += (x.exp() - y.exp()).powi(2);
            den += x.exp().powi(2);
        }
        (num / den).sqrt()
    }

    #[test]
    fn round_trip_on_sine() {
        let cfg = MelConfig::acoustic();
        let x = sine(440.0, 12000);
        let mel = mel_spectrogram(&x, &cfg).unwrap();
        let y = griffin_lim(&mel, &cfg, 32).unwrap();
        let mel2 = mel_spectrogram(&y.scaled(x.peak() / y.peak()), &cfg).unwrap();
        let frac = mel_error_fraction(&mel, &mel2, 1.0);
        assert!(frac >= 0.9, "only {frac} of entries within 1.0");
    }

    #[test]
    fn floor_mel_is_near_silent() {
        let cfg = MelConfig::acoustic();
        let mel = MelSpectrogram {
            values: Array2::from_elem((cfg.n_mels, 20), cfg.floor_value()),
            config_id: cfg.name.clone(),
        };
        let raw = griffin_lim_raw(&mel, &cfg, 4).unwrap();
        let peak = raw.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        assert!(peak < 1e-3, "{peak}");
    }

    #[test]
    fn more_iterations_do_not_increase_error() {
        let cfg = MelConfig::acoustic();
        let x = sine(440.0, 12000);
        let mel = mel_spectrogram(&x, &cfg).unwrap();
        let err = |iters| {
            let y = AudioBuffer::new(griffin_lim_raw(&mel, &cfg, iters).unwrap(), 24000).unwrap();
            mel_convergence(&mel, &mel_spectrogram(&y, &cfg).unwrap())
        };
        let (e1, e32) = (err(1), err(32));
        assert!(e32 <= e1, "{e32} > {e1}");
    }

    #[test]
    fn output_energy_tracks_mel_implied_energy() {
        let cfg = MelConfig::acoustic();
        for freq in [220.0, 440.0, 1500.0] {
            let x = sine(freq, 12000);
            let mel = mel_spectrogram(&x, &cfg).unwrap();
            // Parseval over each Hann-windowed frame of the pseudo-inverted magnitudes.
            let mag = pinv_filterbank(&cfg)
                .unwrap()
                .dot(&mel.values.mapv(f64::exp))
                .mapv(|v| v.max(0.0));
            let w2: f64 = crate::dsp::hann_window(cfg.win).iter().map(|w| w * w).sum();
            let last = cfg.n_fft / 2;
            let mut acc = 0.0;
            for t in 0..mag.ncols() {
                let col = mag.column(t);
                let e: f64 = (0..=last)
                    .map(|k| {
                        let m2 = col[k] * col[k];
                        if k == 0 || k == last {
                            m2
                        } else {
                            2.0 * m2
                        }
                    })
                    .sum();
                acc += e / (cfg.n_fft as f64 * w2);
            }
            let implied_rms = (acc / mag.ncols() as f64).sqrt();
            let y = griffin_lim_raw(&mel, &cfg, 32).unwrap();
            let rms = (y.iter().map(|s| s * s).sum::<f64>() / y.len() as f64).sqrt();
            let ratio = rms / implied_rms;
            assert!((0.25..=4.0).contains(&ratio), "{freq} Hz: ratio {ratio}");
        }
    }

    #[test]
    fn deterministic() {
        let cfg = MelConfig::acoustic();
        let mel = mel_spectrogram(&sine(300.0, 6000), &cfg).unwrap();
        assert_eq!(griffin_lim(&mel, &cfg, 3).unwrap(), griffin_lim(&mel, &cfg, 3).unwrap());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let cfg = MelConfig::acoustic();
        let mel = MelSpectrogram {
            values: Array2::zeros((80, 10)),
            config_id: "x".into(),
        };
        assert!(griffin_lim(&mel, &cfg, 1).is_err());
    }
}
