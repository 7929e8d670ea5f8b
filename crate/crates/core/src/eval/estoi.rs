//! Extended short-time objective intelligibility (Jensen & Taal, 2016).

use rustfft::{num_complex::Complex64, FftPlanner};

use crate::audio::AudioBuffer;
use crate::dsp::resample_samples;
use crate::error::{Error, Result};

const FS: u32 = 10_000;
const N_FRAME: usize = 256;
const NFFT: usize = 512;
const NUM_BANDS: usize = 15;
const MIN_FREQ: f64 = 150.0;
/// Frames per analysis segment (384 ms).
const SEGMENT: usize = 30;
const DYN_RANGE_DB: f64 = 40.0;
const EPS: f64 = f64::EPSILON;

/// Minimum accepted duration.
pub const MIN_DURATION_S: f64 = 0.5;

/// Symmetric Hann window without its zero endpoints.
fn hanning(len: usize) -> Vec<f64> {
    (1..=len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / (len + 1) as f64).cos())
        .collect()
}

fn frame_starts(len: usize, win: usize, hop: usize) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(win)).step_by(hop)
}

/// Drop frames more than `DYN_RANGE_DB` below the loudest frame of `x`, then
/// overlap-add the survivors of both signals.
fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hop = N_FRAME / 2;
    let w = hanning(N_FRAME);
    let starts: Vec<usize> = frame_starts(x.len(), N_FRAME, hop).collect();
    let energy: Vec<f64> = starts
        .iter()
        .map(|&s| {
            let norm = (0..N_FRAME).map(|i| (w[i] * x[s + i]).powi(2)).sum::<f64>().sqrt();
            20.0 * (norm + EPS).log10()
        })
        .collect();
    let max = energy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energy)
        .filter(|(_, &e)| max - DYN_RANGE_DB - e < 0.0)
        .map(|(&s, _)| s)
        .collect();
    let ola = |sig: &[f64]| {
        let len = if kept.is_empty() { 0 } else { (kept.len() + 1) * hop };
        let mut out = vec![0.0; len];
        for (k, &s) in kept.iter().enumerate() {
            for i in 0..N_FRAME {
                out[k * hop + i] += w[i] * sig[s + i];
            }
        }
        out
    };
    (ola(x), ola(y))
}

/// One-third octave band matrix rows as `[lo, hi)` FFT-bin ranges.
fn third_octave_bands() -> Vec<(usize, usize)> {
    let n_bins = NFFT / 2 + 1;
    let freqs: Vec<f64> = (0..n_bins).map(|i| i as f64 * FS as f64 / NFFT as f64).collect();
    let nearest = |f: f64| {
        (0..n_bins)
            .min_by(|&a, &b| (freqs[a] - f).powi(2).total_cmp(&(freqs[b] - f).powi(2)))
            .expect("non-empty")
    };
    (0..NUM_BANDS)
        .map(|k| {
            let k = k as f64;
            let lo = MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

/// Band envelopes, `bands x frames`.
fn band_envelopes(x: &[f64], bands: &[(usize, usize)]) -> Vec<Vec<f64>> {
    let hop = N_FRAME / 2;
    let w = hanning(N_FRAME);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(NFFT);
    let mut out = vec![Vec::new(); bands.len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); NFFT];
    for s in frame_starts(x.len(), N_FRAME, hop) {
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for i in 0..N_FRAME {
            buf[i] = Complex64::new(w[i] * x[s + i], 0.0);
        }
        fft.process(&mut buf);
        for (b, &(lo, hi)) in bands.iter().enumerate() {
            out[b].push(buf[lo..hi].iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt());
        }
    }
    out
}

/// Normalize a `bands x N` segment to zero-mean unit-norm rows, then columns.
fn row_col_normalize(seg: &mut [Vec<f64>]) {
    for row in seg.iter_mut() {
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        row.iter_mut().for_each(|v| *v -= mean);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt() + EPS;
        row.iter_mut().for_each(|v| *v /= norm);
    }
    let n = seg[0].len();
    for j in 0..n {
        let mean = seg.iter().map(|r| r[j]).sum::<f64>() / seg.len() as f64;
        seg.iter_mut().for_each(|r| r[j] -= mean);
        let norm = seg.iter().map(|r| r[j] * r[j]).sum::<f64>().sqrt() + EPS;
        seg.iter_mut().for_each(|r| r[j] /= norm);
    }
}

/// ESTOI of two equal-length 10 kHz signals.
pub(crate) fn estoi_10k(x: &[f64], y: &[f64]) -> f64 {
    let (xs, ys) = remove_silent_frames(x, y);
    let bands = third_octave_bands();
    let xe = band_envelopes(&xs, &bands);
    let ye = band_envelopes(&ys, &bands);
    let frames = xe[0].len();
    if frames < SEGMENT {
        log::warn!("not enough speech frames for ESTOI ({frames} < {SEGMENT})");
        return 1e-5;
    }
    let mut total = 0.0;
    let segments = frames - SEGMENT + 1;
    for m in 0..segments {
        let mut xseg: Vec<Vec<f64>> = xe.iter().map(|r| r[m..m + SEGMENT].to_vec()).collect();
        let mut yseg: Vec<Vec<f64>> = ye.iter().map(|r| r[m..m + SEGMENT].to_vec()).collect();
        row_col_normalize(&mut xseg);
        row_col_normalize(&mut yseg);
        let dot: f64 = xseg.iter().flatten().zip(yseg.iter().flatten()).map(|(a, b)| a * b).sum();
        total += dot / SEGMENT as f64;
    }
    total / segments as f64
}

/// ESTOI of `est` against the reference `reference`, in `[-1, 1]`.
pub fn estoi(reference: &AudioBuffer, est: &AudioBuffer) -> Result<f64> {
    if reference.sample_rate != est.sample_rate {
        return Err(Error::SampleRateMismatch {
            expected: reference.sample_rate,
            got: est.sample_rate,
        });
    }
    if reference.len() != est.len() {
        return Err(Error::Shape(format!("lengths differ: {} vs {}", reference.len(), est.len())));
    }
    if reference.duration_s() < MIN_DURATION_S {
        return Err(Error::InputTooShort {
            needed: (MIN_DURATION_S * reference.sample_rate as f64).ceil() as usize,
            got: reference.len(),
        });
    }
    let x = resample_samples(&reference.samples, reference.sample_rate, FS);
    let y = resample_samples(&est.samples, est.sample_rate, FS);
    Ok(estoi_10k(&x, &y).clamp(-1.0, 1.0))
}
