//! Waveform and spectral primitives.
//!
//! Framing convention used everywhere: frames of `win` samples taken every
//! `hop` samples with no center padding, periodic Hann window, zero-padded on
//! the right to `n_fft`. A signal of `len` samples therefore yields
//! `floor((len - win) / hop) + 1` frames.

mod mel;
mod resample;
mod stft;
mod vocoder;

pub use mel::{mel_filterbank, mel_spectrogram, MelConfig, MelSpectrogram};
pub use resample::resample;
pub(crate) use resample::resample_samples;
pub use stft::{frame_count, hann_window, istft, stft, Spectrogram};
pub use vocoder::{griffin_lim, griffin_lim_raw, GriffinLim, Vocoder};
