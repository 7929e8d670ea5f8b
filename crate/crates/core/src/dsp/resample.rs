//! Band-limited rational resampling with a Kaiser-windowed sinc, evaluated
//! through a per-phase coefficient table.

use crate::audio::{AudioBuffer, SUPPORTED_RATES};
use crate::error::{Error, Result};

/// Zero crossings of the sinc kept on each side, measured at the lower rate.
const ZERO_CROSSINGS: usize = 32;
/// Passband edge as a fraction of the lower Nyquist.
const ROLLOFF: f64 = 0.92;
/// Kaiser shape parameter, roughly 80 dB stopband.
const KAISER_BETA: f64 = 8.6;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Resample to `target_rate`. Output length is `round(len * target / source)`.
/// Identical rates return a bit-identical copy.
pub fn resample(audio: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    if !SUPPORTED_RATES.contains(&target_rate) {
        return Err(Error::UnsupportedSampleRate(target_rate));
    }
    if audio.sample_rate == target_rate {
        return Ok(audio.clone());
    }
    AudioBuffer::new(resample_samples(&audio.samples, audio.sample_rate, target_rate), target_rate)
}

/// Rate conversion on raw samples between any two positive rates.
pub(crate) fn resample_samples(x: &[f64], src_rate: u32, dst_rate: u32) -> Vec<f64> {
    if src_rate == dst_rate {
        return x.to_vec();
    }
    let src = src_rate as u64;
    let dst = dst_rate as u64;
    let g = gcd(src, dst);
    let up = (dst / g) as usize;
    let down = (src / g) as usize;
    let out_len = ((x.len() as u64 * dst) as f64 / src as f64).round() as usize;

    // Cutoff relative to the input rate (cycles per input sample * 2).
    let ratio = (dst as f64 / src as f64).min(1.0);
    let cutoff = ratio * ROLLOFF;
    let half_width = ((ZERO_CROSSINGS as f64) / cutoff).ceil() as usize;
    let taps = 2 * half_width;
    let i0_beta = bessel_i0(KAISER_BETA);

    // Phase j covers fractional input offset j / up. Tap i sits at input
    // index base - half_width + 1 + i.
    let mut table = vec![0.0; up * taps];
    for j in 0..up {
        let frac = j as f64 / up as f64;
        for i in 0..taps {
            let offset = frac + half_width as f64 - 1.0 - i as f64;
            let x = offset / half_width as f64;
            let w = if x.abs() <= 1.0 {
                bessel_i0(KAISER_BETA * (1.0 - x * x).sqrt()) / i0_beta
            } else {
                0.0
            };
            table[j * taps + i] = cutoff * sinc(cutoff * offset) * w;
        }
    }

    let n_in = x.len() as isize;
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let pos = n * down;
        let base = (pos / up) as isize;
        let phase = pos % up;
        let coeffs = &table[phase * taps..(phase + 1) * taps];
        let first = base - half_width as isize + 1;
        let mut acc = 0.0;
        for (i, c) in coeffs.iter().enumerate() {
            let k = first + i as isize;
            if k >= 0 && k < n_in {
                acc += x[k as usize] * c;
            }
        }
        out.push(acc);
    }
    out
}
