use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ops::{apply_bandlimit, apply_clip, apply_reverb, mix_noise};
use super::{AssetBank, DegradationRecipe};
use crate::audio::AudioBuffer;
use crate::error::Result;

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub clean_path: PathBuf,
    pub degraded_path: PathBuf,
    pub recipe: DegradationRecipe,
    /// Gain applied by the post-mix peak guard (1 when not triggered).
    pub applied_gain: f64,
    pub duration_s: f64,
}

#[derive(Debug, Clone)]
pub struct SimulatedPair {
    pub clean: AudioBuffer,
    pub degraded: AudioBuffer,
    pub recipe: DegradationRecipe,
    pub applied_gain: f64,
}

impl SimulatedPair {
    pub fn record(&self, clean_path: PathBuf, degraded_path: PathBuf) -> PairRecord {
        PairRecord {
            clean_path,
            degraded_path,
            recipe: self.recipe.clone(),
            applied_gain: self.applied_gain,
            duration_s: self.clean.duration_s(),
        }
    }
}

/// Apply a recipe: reverb, then clip, then band limit, then noise. The clean
/// target is the untouched input. Pure in `(clean, bank, recipe)`.
pub fn simulate_pair(clean: &AudioBuffer, bank: &AssetBank, recipe: &DegradationRecipe) -> Result<SimulatedPair> {
    recipe.validate(bank)?;
    let rate = clean.sample_rate;
    let mut x = clean.clone();
    if let Some(r) = &recipe.reverb {
        x = apply_reverb(&x, &bank.rir_at(&r.rir_id, rate)?)?;
    }
    if let Some(c) = &recipe.clip {
        x = apply_clip(&x, c.threshold)?;
    }
    if let Some(b) = &recipe.bandlimit {
        x = apply_bandlimit(&x, b.bandwidth_hz)?;
    }
    let mut applied_gain = 1.0;
    if let Some(n) = &recipe.noise {
        let mix = mix_noise(&x, &bank.noise_at(&n.noise_id, rate)?, n.snr_db)?;
        applied_gain = mix.gain;
        x = mix.audio;
    }
    debug_assert_eq!(x.len(), clean.len());
    Ok(SimulatedPair {
        clean: clean.clone(),
        degraded: x,
        recipe: recipe.clone(),
        applied_gain,
    })
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[PairRecord]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<PairRecord>> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{sample_recipe, DistortionProbs, NoiseParams};
    use crate::synth;

    fn speech() -> AudioBuffer {
        synth::utterance(11, synth::Speaker::from_seed(11), 0.5, 24000).unwrap()
    }

    #[test]
    fn identity_recipe_passes_clean_through() {
        let bank = AssetBank::synthetic(1, 24000, 0.2).unwrap();
        let x = speech();
        let p = simulate_pair(&x, &bank, &DegradationRecipe::identity(0)).unwrap();
        assert_eq!(p.degraded, x);
        assert_eq!(p.clean, x);
    }

    #[test]
    fn noise_only_matches_mix_noise() {
        let bank = AssetBank::synthetic(1, 24000, 0.2).unwrap();
        let x = speech();
        let mut r = DegradationRecipe::identity(0);
        r.noise = Some(NoiseParams {
            noise_id: "pink-0".into(),
            snr_db: 0.0,
        });
        let p = simulate_pair(&x, &bank, &r).unwrap();
        let direct = mix_noise(&x, bank.noise("pink-0").unwrap(), 0.0).unwrap();
        assert_eq!(p.degraded, direct.audio);
    }

    #[test]
    fn full_recipe_is_reproducible_and_length_preserving() {
        let bank = AssetBank::synthetic(1, 24000, 0.2).unwrap();
        let x = speech();
        let all = DistortionProbs {
            noise: 1.0,
            reverb: 1.0,
            clip: 1.0,
            bandlimit: 1.0,
        };
        for seed in 0..4 {
            let r = sample_recipe(seed, &all, &bank).unwrap();
            let a = simulate_pair(&x, &bank, &r).unwrap();
            let b = simulate_pair(&x, &bank, &r).unwrap();
            assert_eq!(a.degraded, b.degraded);
            assert_eq!(a.degraded.len(), x.len());
        }
    }

    #[test]
    fn missing_asset_is_an_error() {
        let bank = AssetBank::default();
        let mut r = DegradationRecipe::identity(0);
        r.noise = Some(NoiseParams {
            noise_id: "ghost".into(),
            snr_db: 0.0,
        });
        assert!(simulate_pair(&speech(), &bank, &r).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rec = PairRecord {
            clean_path: "c/0.wav".into(),
            degraded_path: "d/0.wav".into(),
            recipe: DegradationRecipe::identity(3),
            applied_gain: 1.0,
            duration_s: 1.0,
        };
        let path = dir.path().join("m.jsonl");
        write_manifest(&path, &[rec.clone(), rec.clone()]).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), vec![rec.clone(), rec]);
    }
}
