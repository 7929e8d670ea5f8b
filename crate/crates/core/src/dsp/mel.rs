use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::stft::stft;
use crate::audio::AudioBuffer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelConfig {
    /// Profile identifier recorded on every spectrogram computed with it.
    pub name: String,
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub win: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl MelConfig {
    /// 16 kHz, 50 frames per second. Feeds the tokenizer and the audio encoder.
    pub fn tokenizer() -> Self {
        Self {
            name: "tokenizer-16k".into(),
            sample_rate: 16000,
            n_fft: 1024,
            hop: 320,
            win: 640,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-5,
        }
    }

    /// 24 kHz profile of the flow-matching stage.
    pub fn acoustic() -> Self {
        Self {
            name: "acoustic-24k".into(),
            sample_rate: 24000,
            n_fft: 1024,
            hop: 256,
            win: 1024,
            n_mels: 100,
            fmin: 0.0,
            fmax: 12000.0,
            log_floor: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("mel profile `{}`: {m}", self.name)));
        if self.hop == 0 || self.hop > self.win || self.win > self.n_fft {
            return bad("need 0 < hop <= win <= n_fft");
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return bad("need 0 <= fmin < fmax <= sample_rate / 2");
        }
        if self.n_mels == 0 || !(self.log_floor > 0.0) {
            return bad("n_mels and log_floor must be positive");
        }
        Ok(())
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    pub fn frames_for(&self, len: usize) -> Option<usize> {
        super::frame_count(len, self.win, self.hop)
    }

    pub fn floor_value(&self) -> f64 {
        self.log_floor.ln()
    }
}

/// Log-amplitude mel spectrogram, shape `(n_mels, n_frames)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Array2<f64>,
    pub config_id: String,
}

impl MelSpectrogram {
    pub fn n_mels(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, shape `(n_mels, n_fft / 2 + 1)`, HTK mel scale,
/// each row normalized to unit L1 norm.
pub fn mel_filterbank(cfg: &MelConfig) -> Array2<f64> {
    let n_bins = cfg.n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    let mut fb = Array2::<f64>::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            fb[[m, k]] = w;
        }
        let sum: f64 = fb.row(m).sum();
        if sum > 0.0 {
            fb.row_mut(m).mapv_inplace(|w| w / sum);
        } else {
            // Filter narrower than the bin spacing: collapse onto the nearest bin.
            let k = ((center / bin_hz).round() as usize).min(n_bins - 1);
            fb[[m, k]] = 1.0;
        }
    }
    fb
}

pub fn mel_spectrogram(audio: &AudioBuffer, cfg: &MelConfig) -> Result<MelSpectrogram> {
    if audio.sample_rate != cfg.sample_rate {
        return Err(Error::SampleRateMismatch {
            expected: cfg.sample_rate,
            got: audio.sample_rate,
        });
    }
    let spec = stft(audio, cfg)?;
    let mag = spec.mapv(|c| c.norm());
    let fb = mel_filterbank(cfg);
    let floor = cfg.log_floor;
    let values = fb.dot(&mag).mapv(|v| v.max(floor).ln());
    Ok(MelSpectrogram {
        values,
        config_id: cfg.name.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn noise(len: usize, sr: u32, seed: u64) -> AudioBuffer {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        AudioBuffer::new((0..len).map(|_| rng.random_range(-0.8..0.8)).collect(), sr).unwrap()
    }

    #[test]
    fn profiles_are_valid() {
        MelConfig::tokenizer().validate().unwrap();
        MelConfig::acoustic().validate().unwrap();
        assert_eq!(MelConfig::tokenizer().frame_rate(), 50.0);
    }

    #[test]
    fn filterbank_rows_are_l1_normalized() {
        for cfg in [MelConfig::tokenizer(), MelConfig::acoustic()] {
            let fb = mel_filterbank(&cfg);
            for row in fb.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&w| w >= 0.0));
            }
        }
    }

    #[test]
    fn silence_sits_on_the_floor() {
        let cfg = MelConfig::acoustic();
        let mel = mel_spectrogram(&AudioBuffer::silence(4000, 24000).unwrap(), &cfg).unwrap();
        assert!(mel.values.iter().all(|&v| v == cfg.log_floor.ln()));
    }

    #[test]
    fn tokenizer_profile_frame_count() {
        let cfg = MelConfig::tokenizer();
        let mel = mel_spectrogram(&noise(16000, 16000, 1), &cfg).unwrap();
        // floor((16000 - 640) / 320) + 1
        assert_eq!(mel.n_frames(), 49);
        assert_eq!(mel.n_mels(), 80);
    }

    #[test]
    fn halving_amplitude_subtracts_ln2() {
        let cfg = MelConfig::acoustic();
        let x = noise(6000, 24000, 7);
        let a = mel_spectrogram(&x, &cfg).unwrap();
        let b = mel_spectrogram(&x.scaled(0.5), &cfg).unwrap();
        let floor = cfg.floor_value();
        let mut checked = 0;
        for (va, vb) in a.values.iter().zip(b.values.iter()) {
            if *vb > floor {
                assert!((va - vb - 2f64.ln()).abs() < 1e-9);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn rate_mismatch_is_an_error() {
        let err = mel_spectrogram(&noise(30000, 16000, 2), &MelConfig::acoustic()).unwrap_err();
        assert!(matches!(err, Error::SampleRateMismatch { .. }));
    }

    proptest::proptest! {
        #[test]
        fn frame_count_matches_closed_form(len in 1024usize..6000, gain in 1.0f64..4.0) {
            let cfg = MelConfig::acoustic();
            let x = noise(len, 24000, len as u64).scaled(0.2);
            let a = mel_spectrogram(&x, &cfg).unwrap();
            proptest::prop_assert_eq!(a.n_frames(), (len - cfg.win) / cfg.hop + 1);
            // scaling up never lowers any entry
            let b = mel_spectrogram(&x.scaled(gain), &cfg).unwrap();
            for (va, vb) in a.values.iter().zip(b.values.iter()) {
                proptest::prop_assert!(vb >= va);
            }
        }
    }
}
