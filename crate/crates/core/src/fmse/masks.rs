use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frame masks for one training example. `true` means "keep".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    /// Clean-context keep mask; `false` frames form the generation region.
    pub m1: Vec<bool>,
    /// Degraded-condition keep mask.
    pub m2: Vec<bool>,
    /// Drop the enhancement conditions (classifier-free guidance training).
    pub uncond: bool,
}

impl MaskSpec {
    pub fn generation_frames(&self) -> usize {
        self.m1.iter().filter(|&&k| !k).count()
    }

    /// Full generation, nothing dropped.
    pub fn full(t: usize) -> Self {
        Self {
            m1: vec![false; t],
            m2: vec![true; t],
            uncond: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    /// Generation-span fraction range.
    pub gen_frac: (f64, f64),
    pub degrad_mask_prob: f64,
    pub degrad_frac: (f64, f64),
    pub degrad_max_spans: usize,
    pub uncond_prob: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            gen_frac: (0.7, 1.0),
            degrad_mask_prob: 0.5,
            degrad_frac: (0.1, 0.5),
            degrad_max_spans: 3,
            uncond_prob: 0.2,
        }
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Draw masks for `t` frames. Every call consumes the same number of draws
/// for a given number of degrad spans, so streams stay aligned.
pub fn sample_masks<R: Rng>(rng: &mut R, t: usize, cfg: &MaskConfig) -> Result<MaskSpec> {
    if t < 4 {
        return Err(Error::invalid(format!("need at least 4 frames for masking, got {t}")));
    }
    let u = uniform(rng, cfg.gen_frac);
    let gen_len = ((u * t as f64).round() as usize).clamp(1, t);
    let start = rng.random_range(0..=t - gen_len);
    let mut m1 = vec![true; t];
    m1[start..start + gen_len].iter_mut().for_each(|k| *k = false);

    let mut m2 = vec![true; t];
    if rng.random::<f64>() < cfg.degrad_mask_prob {
        let spans = rng.random_range(1..=cfg.degrad_max_spans.max(1));
        let total = (uniform(rng, cfg.degrad_frac) * t as f64).round() as usize;
        // split `total` frames into `spans` pieces at random cut points
        let mut cuts: Vec<usize> = (0..spans - 1).map(|_| rng.random_range(0..=total)).collect();
        cuts.sort_unstable();
        let mut prev = 0;
        for end in cuts.into_iter().chain(std::iter::once(total)) {
            let len = (end - prev).min(t);
            prev = end;
            if len == 0 {
                continue;
            }
            let s = rng.random_range(0..=t - len);
            m2[s..s + len].iter_mut().for_each(|k| *k = false);
        }
    }
    let uncond = rng.random::<f64>() < cfg.uncond_prob;
    debug_assert!(m1.iter().any(|k| !k));
    Ok(MaskSpec { m1, m2, uncond })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_generation_when_fraction_is_one() {
        let cfg = MaskConfig {
            gen_frac: (1.0, 1.0),
            degrad_mask_prob: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in [4, 17, 90] {
            let m = sample_masks(&mut rng, t, &cfg).unwrap();
            assert!(m.m1.iter().all(|k| !k));
            assert!(m.m2.iter().all(|&k| k));
        }
    }

    #[test]
    fn mean_generation_fraction() {
        let cfg = MaskConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = 200;
        let n = 100_000;
        let mut acc = 0.0;
        let mut uncond = 0usize;
        let mut degrad = 0usize;
        for _ in 0..n {
            let m = sample_masks(&mut rng, t, &cfg).unwrap();
            acc += m.generation_frames() as f64 / t as f64;
            uncond += m.uncond as usize;
            degrad += m.m2.iter().any(|k| !k) as usize;
        }
        let mean = acc / n as f64;
        assert!((0.83..=0.87).contains(&mean), "{mean}");
        assert!((uncond as f64 / n as f64 - 0.2).abs() < 0.01);
        assert!((degrad as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn generation_span_is_contiguous_and_degrad_fraction_bounded() {
        let cfg = MaskConfig {
            degrad_mask_prob: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let m = sample_masks(&mut rng, 90, &cfg).unwrap();
            let edges = m.m1.windows(2).filter(|w| w[0] != w[1]).count();
            assert!(edges <= 2);
            let dropped = m.m2.iter().filter(|k| !**k).count();
            assert!(dropped >= 1 && dropped <= 45, "{dropped}");
        }
    }

    #[test]
    fn too_few_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_masks(&mut rng, 3, &MaskConfig::default()).is_err());
    }
}
