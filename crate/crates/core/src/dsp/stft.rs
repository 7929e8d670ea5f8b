use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;

use super::MelConfig;
use crate::audio::AudioBuffer;
use crate::error::{Error, Result};

/// Complex spectrogram, shape `(n_fft / 2 + 1, frames)`.
pub type Spectrogram = Array2<Complex64>;

/// Periodic Hann window of length `len`.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Number of frames for a signal of `len` samples, `None` if shorter than one window.
pub fn frame_count(len: usize, win: usize, hop: usize) -> Option<usize> {
    (len >= win).then(|| (len - win) / hop + 1)
}

pub fn stft(audio: &AudioBuffer, cfg: &MelConfig) -> Result<Spectrogram> {
    stft_samples(&audio.samples, cfg)
}

pub(crate) fn stft_samples(samples: &[f64], cfg: &MelConfig) -> Result<Spectrogram> {
    let n_frames = frame_count(samples.len(), cfg.win, cfg.hop).ok_or(Error::InputTooShort {
        needed: cfg.win,
        got: samples.len(),
    })?;
    let n_bins = cfg.n_fft / 2 + 1;
    let window = hann_window(cfg.win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let mut out = Array2::<Complex64>::zeros((n_bins, n_frames));
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.n_fft];
    for t in 0..n_frames {
        let start = t * cfg.hop;
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for (i, w) in window.iter().enumerate() {
            buf[i] = Complex64::new(samples[start + i] * w, 0.0);
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            out[[k, t]] = buf[k];
        }
    }
    Ok(out)
}

/// Inverse STFT by windowed overlap-add, normalized by the summed squared
/// window (floored at 1% of its maximum). Output length is `(frames - 1) * hop + win`.
pub fn istft(spec: &Spectrogram, cfg: &MelConfig) -> Result<Vec<f64>> {
    let (n_bins, n_frames) = spec.dim();
    if n_bins != cfg.n_fft / 2 + 1 {
        return Err(Error::Shape(format!(
            "istft expects {} bins, got {n_bins}",
            cfg.n_fft / 2 + 1
        )));
    }
    if n_frames == 0 {
        return Ok(Vec::new());
    }
    let len = (n_frames - 1) * cfg.hop + cfg.win;
    let window = hann_window(cfg.win);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(cfg.n_fft);
    let mut out = vec![0.0; len];
    let mut norm = vec![0.0; len];
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.n_fft];
    let scale = 1.0 / cfg.n_fft as f64;
    for t in 0..n_frames {
        // Hermitian fill of the full spectrum.
        for k in 0..n_bins {
            buf[k] = spec[[k, t]];
        }
        for k in n_bins..cfg.n_fft {
            buf[k] = spec[[cfg.n_fft - k, t]].conj();
        }
        buf[0].im = 0.0;
        if cfg.n_fft % 2 == 0 {
            buf[cfg.n_fft / 2].im = 0.0;
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop;
        for (i, w) in window.iter().enumerate() {
            out[start + i] += buf[i].re * scale * w;
            norm[start + i] += w * w;
        }
    }
    // Window-sum floor keeps the sparsely covered edges from being amplified.
    let floor = 1e-2 * norm.iter().fold(0.0f64, |m, &v| m.max(v));
    for (o, n) in out.iter_mut().zip(&norm) {
        *o /= n.max(floor);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, sr: u32, len: usize, amp: f64) -> AudioBuffer {
        let s = (0..len)
            .map(|n| amp * (2.0 * std::f64::consts::PI * freq * n as f64 / sr as f64).sin())
            .collect();
        AudioBuffer::new(s, sr).unwrap()
    }

    #[test]
    fn silence_gives_zero_matrix_of_expected_shape() {
        let cfg = MelConfig::acoustic();
        let spec = stft(&AudioBuffer::silence(24000, 24000).unwrap(), &cfg).unwrap();
        assert_eq!(spec.dim(), (513, 90));
        assert!(spec.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        let cfg = MelConfig::acoustic();
        let spec = stft(&sine(1000.0, 24000, 24000, 0.5), &cfg).unwrap();
        // DFT bin of 1 kHz at 24 kHz with a 1024-point FFT
        let expected = (1000.0f64 * 1024.0 / 24000.0).round() as usize;
        assert_eq!(expected, 43);
        for t in 0..spec.ncols() {
            let col = spec.column(t);
            let argmax = (0..col.len())
                .max_by(|&a, &b| col[a].norm().total_cmp(&col[b].norm()))
                .unwrap();
            assert_eq!(argmax, expected, "frame {t}");
        }
    }

    #[test]
    fn deterministic() {
        let cfg = MelConfig::acoustic();
        let x = sine(333.0, 24000, 5000, 0.3);
        assert_eq!(stft(&x, &cfg).unwrap(), stft(&x, &cfg).unwrap());
    }

    #[test]
    fn too_short_is_an_error() {
        let cfg = MelConfig::acoustic();
        let err = stft(&AudioBuffer::silence(1000, 24000).unwrap(), &cfg).unwrap_err();
        assert!(err.to_string().contains("input too short"));
    }

    #[test]
    fn istft_inverts_stft_away_from_edges() {
        let cfg = MelConfig::acoustic();
        let x = sine(440.0, 24000, 8000, 0.7);
        let y = istft(&stft(&x, &cfg).unwrap(), &cfg).unwrap();
        for n in cfg.win..y.len() - cfg.win {
            assert!((x.samples[n] - y[n]).abs() < 1e-9);
        }
    }
}
