//! Mono waveform container and WAV I/O.

use std::path::Path;

use crate::error::{Error, Result};

/// Sample rates any buffer produced by this crate may carry.
pub const SUPPORTED_RATES: [u32; 6] = [2000, 4000, 8000, 16000, 22050, 24000];

/// Rate of the tokenizer / language-model branch.
pub const TOKEN_RATE_HZ: u32 = 16000;
/// Rate of the acoustic (mel flow-matching) branch.
pub const ACOUSTIC_RATE_HZ: u32 = 24000;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if !SUPPORTED_RATES.contains(&sample_rate) {
            return Err(Error::UnsupportedSampleRate(sample_rate));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numerical(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }

    /// Mean-square power over the full length.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Scale so the absolute peak equals `target`. Silent buffers are returned as-is.
    pub fn peak_normalized(&self, target: f64) -> Self {
        let peak = self.peak();
        if peak == 0.0 {
            return self.clone();
        }
        self.scaled(target / peak)
    }

    /// Zero-pad or truncate the tail to exactly `len` samples.
    pub fn fit_length(&self, len: usize) -> Self {
        let mut samples = self.samples.clone();
        samples.resize(len, 0.0);
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }

    pub fn slice(&self, start: usize, len: usize) -> Self {
        let end = (start + len).min(self.samples.len());
        let start = start.min(end);
        Self {
            samples: self.samples[start..end].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::invalid(format!(
                "{}: expected mono audio, found {} channels",
                path.display(),
                spec.channels
            )));
        }
        let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
            (hound::SampleFormat::Int, 16) => reader
                .samples::<i16>()
                .map(|s| s.map(|v| v as f64 / 32768.0))
                .collect::<std::result::Result<_, _>>()?,
            (hound::SampleFormat::Float, 32) => reader
                .samples::<f32>()
                .map(|s| s.map(|v| v as f64))
                .collect::<std::result::Result<_, _>>()?,
            (fmt, bits) => {
                return Err(Error::invalid(format!(
                    "{}: unsupported WAV encoding {fmt:?}/{bits}-bit (use 16-bit PCM or 32-bit float)",
                    path.display()
                )))
            }
        };
        Self::new(samples, spec.sample_rate)
    }

    /// Writes 32-bit float little-endian mono WAV.
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            writer.write_sample(s as f32)?;
        }
        writer.finalize()?;
        Ok(())
    }

    /// Writes 16-bit PCM mono WAV (samples clamped to [-1, 1]).
    pub fn write_wav_pcm16(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
        }
        writer.finalize()?;
        Ok(())
    }
}
