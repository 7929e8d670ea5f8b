//! Seeded synthetic material: speech-like utterances, noise beds and room
//! impulse responses. Everything here is a pure function of its seed.
//!
//! Utterances are sequences of "phones" drawn from a fixed inventory. A voiced
//! phone is a harmonic series on a drifting pitch contour shaped by three
//! formant resonances; an unvoiced phone is band-passed noise. Neighbouring
//! phones are cross-faded over 10 ms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::{num_complex::Complex64, FftPlanner};

use crate::audio::AudioBuffer;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
enum Phone {
    Voiced { formants: [f64; 3] },
    Unvoiced { center: f64, width: f64 },
    Pause,
}

const INVENTORY: [Phone; 12] = [
    Phone::Voiced { formants: [730.0, 1090.0, 2440.0] },
    Phone::Voiced { formants: [270.0, 2290.0, 3010.0] },
    Phone::Voiced { formants: [300.0, 870.0, 2240.0] },
    Phone::Voiced { formants: [530.0, 1840.0, 2480.0] },
    Phone::Voiced { formants: [570.0, 840.0, 2410.0] },
    Phone::Voiced { formants: [660.0, 1720.0, 2410.0] },
    Phone::Voiced { formants: [440.0, 1020.0, 2240.0] },
    Phone::Voiced { formants: [250.0, 1500.0, 2600.0] },
    Phone::Unvoiced { center: 5000.0, width: 2500.0 },
    Phone::Unvoiced { center: 3000.0, width: 1500.0 },
    Phone::Unvoiced { center: 1800.0, width: 900.0 },
    Phone::Pause,
];

/// Voice characteristics shared by all utterances of one synthetic speaker.
#[derive(Debug, Clone, Copy)]
pub struct Speaker {
    pub f0_hz: f64,
    pub formant_scale: f64,
}

impl Speaker {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
        Self {
            f0_hz: rng.random_range(90.0..240.0),
            formant_scale: rng.random_range(0.9..1.15),
        }
    }
}

fn formant_gain(f: f64, formants: &[f64; 3], scale: f64) -> f64 {
    let bandwidths = [90.0, 120.0, 160.0];
    let levels = [1.0, 0.6, 0.3];
    let mut g = 0.0;
    for ((&fc, &bw), &lv) in formants.iter().zip(&bandwidths).zip(&levels) {
        let d = (f - fc * scale) / bw;
        g += lv * (-0.5 * d * d).exp();
    }
    // glottal tilt
    g * (1.0 + f / 500.0).powf(-0.6) + 0.002
}

/// Two-pole resonator applied in place.
fn resonate(x: &mut [f64], center: f64, width: f64, sr: f64) {
    let r = (-std::f64::consts::PI * width / sr).exp();
    let theta = 2.0 * std::f64::consts::PI * center / sr;
    let (a1, a2) = (-2.0 * r * theta.cos(), r * r);
    let gain = 1.0 - r;
    let (mut y1, mut y2) = (0.0, 0.0);
    for s in x.iter_mut() {
        let y = gain * *s - a1 * y1 - a2 * y2;
        y2 = y1;
        y1 = y;
        *s = y;
    }
}

/// A speech-like utterance of `duration_s` seconds for the given speaker,
/// peak-normalized to 0.7.
pub fn utterance(seed: u64, speaker: Speaker, duration_s: f64, sample_rate: u32) -> Result<AudioBuffer> {
    let sr = sample_rate as f64;
    let len = (duration_s * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    // Phone segmentation.
    let mut segments: Vec<(usize, usize, Phone)> = Vec::new();
    let mut pos = 0usize;
    let mut prev = usize::MAX;
    while pos < len {
        let dur = (rng.random_range(0.06..0.16) * sr) as usize;
        let mut idx = rng.random_range(0..INVENTORY.len());
        if idx == prev {
            idx = (idx + 1) % INVENTORY.len();
        }
        prev = idx;
        let end = (pos + dur).min(len);
        segments.push((pos, end, INVENTORY[idx]));
        pos = end;
    }

    // Pitch contour: slow drift plus declination.
    let drift_rate = rng.random_range(1.5..4.0);
    let drift_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut phase = vec![0.0; len];
    let mut acc = 0.0;
    for (n, p) in phase.iter_mut().enumerate() {
        let t = n as f64 / sr;
        let f0 = speaker.f0_hz
            * (1.0 + 0.08 * (std::f64::consts::TAU * drift_rate * t + drift_phase).sin())
            * (1.0 - 0.1 * t / duration_s.max(1e-3));
        acc += std::f64::consts::TAU * f0 / sr;
        *p = acc;
    }

    let fade = (0.01 * sr) as usize;
    let nyquist_guard = 0.45 * sr;
    let mut out = vec![0.0; len];
    for &(start, end, phone) in &segments {
        let lo = start.saturating_sub(fade / 2);
        let hi = (end + fade / 2).min(len);
        let weight = |n: usize| -> f64 {
            let rise = ((n + fade / 2).saturating_sub(start)) as f64 / fade.max(1) as f64;
            let fall = ((end + fade / 2).saturating_sub(n)) as f64 / fade.max(1) as f64;
            let w = rise.min(fall).clamp(0.0, 1.0);
            0.5 - 0.5 * (std::f64::consts::PI * w).cos()
        };
        match phone {
            Phone::Voiced { formants } => {
                let n_harm = (nyquist_guard.min(5000.0) / speaker.f0_hz) as usize;
                let amps: Vec<f64> = (1..=n_harm)
                    .map(|h| formant_gain(h as f64 * speaker.f0_hz, &formants, speaker.formant_scale))
                    .collect();
                for n in lo..hi {
                    let w = weight(n);
                    let mut s = 0.0;
                    for (h, a) in amps.iter().enumerate() {
                        s += a * ((h + 1) as f64 * phase[n]).sin();
                    }
                    out[n] += w * s;
                }
            }
            Phone::Unvoiced { center, width } => {
                let center = center.min(nyquist_guard * 0.8);
                let mut buf: Vec<f64> = (lo..hi).map(|_| normal.sample(&mut rng)).collect();
                resonate(&mut buf, center, width, sr);
                for (i, n) in (lo..hi).enumerate() {
                    out[n] += 0.4 * weight(n) * buf[i];
                }
            }
            Phone::Pause => {}
        }
    }
    AudioBuffer::new(out, sample_rate).map(|a| a.peak_normalized(0.7))
}

pub fn white_noise(seed: u64, len: usize, sample_rate: u32) -> Result<AudioBuffer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.25).expect("normal");
    AudioBuffer::new((0..len).map(|_| normal.sample(&mut rng)).collect(), sample_rate)
        .map(|a| a.peak_normalized(0.8))
}

/// 1/f-shaped noise via spectral weighting of white noise.
pub fn pink_noise(seed: u64, len: usize, sample_rate: u32) -> Result<AudioBuffer> {
    let white = white_noise(seed, len, sample_rate)?;
    let mut buf: Vec<Complex64> = white.samples.iter().map(|&s| Complex64::new(s, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let kk = k.min(len - k).max(1) as f64;
        *c /= kk.sqrt();
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    AudioBuffer::new(buf.iter().map(|c| c.re).collect(), sample_rate).map(|a| a.peak_normalized(0.8))
}

/// Overlapping synthetic talkers.
pub fn babble_noise(seed: u64, len: usize, sample_rate: u32) -> Result<AudioBuffer> {
    let duration = len as f64 / sample_rate as f64;
    let mut mix = vec![0.0; len];
    for k in 0..5u64 {
        let s = seed.wrapping_mul(31).wrapping_add(k);
        let u = utterance(s, Speaker::from_seed(s), duration, sample_rate)?;
        for (m, v) in mix.iter_mut().zip(&u.samples) {
            *m += v;
        }
    }
    AudioBuffer::new(mix, sample_rate).map(|a| a.fit_length(len).peak_normalized(0.8))
}

/// Exponentially decaying noise tail behind a unit direct path.
pub fn room_impulse_response(seed: u64, sample_rate: u32) -> Result<AudioBuffer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let rt60 = rng.random_range(0.2..0.8);
    let len = (rt60 * 0.75 * sr) as usize;
    let normal = Normal::new(0.0, 1.0).expect("normal");
    let predelay = (rng.random_range(0.002..0.01) * sr) as usize;
    let mut h = vec![0.0; len.max(predelay + 2)];
    h[0] = 1.0;
    for (n, v) in h.iter_mut().enumerate().skip(predelay) {
        let t = n as f64 / sr;
        *v += 0.25 * normal.sample(&mut rng) * (-6.9 * t / rt60).exp();
    }
    AudioBuffer::new(h, sample_rate)
}
