use ndarray::Array2;

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};

/// Upper bound reported for a perfect estimate.
pub const SI_SDR_CAP_DB: f64 = 60.0;

/// Scale-invariant SDR of `est` against `reference`, in dB, capped at 60.
pub fn si_sdr(reference: &AudioBuffer, est: &AudioBuffer) -> Result<f64> {
    if reference.sample_rate != est.sample_rate {
        return Err(Error::SampleRateMismatch {
            expected: reference.sample_rate,
            got: est.sample_rate,
        });
    }
    if reference.len() != est.len() {
        return Err(Error::Shape(format!("lengths differ: {} vs {}", reference.len(), est.len())));
    }
    let rr: f64 = reference.samples.iter().map(|v| v * v).sum();
    if rr == 0.0 {
        return Err(Error::invalid("reference signal is all zeros"));
    }
    let alpha = reference.samples.iter().zip(&est.samples).map(|(r, e)| r * e).sum::<f64>() / rr;
    let (mut target, mut noise) = (0.0, 0.0);
    for (r, e) in reference.samples.iter().zip(&est.samples) {
        let t = alpha * r;
        target += t * t;
        noise += (e - t) * (e - t);
    }
    if noise == 0.0 {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target / noise).log10()).min(SI_SDR_CAP_DB))
}

/// Log-spectral distance between two `F x T` log-amplitude matrices: the
/// mean over frames of the RMS difference over bins.
pub fn lsd(reference: &Array2<f64>, est: &Array2<f64>) -> Result<f64> {
    if reference.dim() != est.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", reference.dim(), est.dim())));
    }
    let (f, t) = reference.dim();
    if f == 0 || t == 0 {
        return Err(Error::Shape("empty spectrogram".into()));
    }
    let total: f64 = (0..t)
        .map(|j| {
            let ms = (0..f).map(|i| (reference[[i, j]] - est[[i, j]]).powi(2)).sum::<f64>() / f as f64;
            ms.sqrt()
        })
        .sum();
    Ok(total / t as f64)
}

pub fn edit_distance(a: &[u32], b: &[u32]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + (x != y) as usize).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Levenshtein distance over the reference length. An empty reference gives
/// the hypothesis length (0 when both are empty).
pub fn token_error_rate(reference: &[u32], hyp: &[u32]) -> f64 {
    if reference.is_empty() {
        return hyp.len() as f64;
    }
    edit_distance(reference, hyp) as f64 / reference.len() as f64
}
