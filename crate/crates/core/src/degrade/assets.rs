use std::collections::BTreeMap;
use std::path::Path;

use crate::audio::AudioBuffer;
use crate::dsp::resample;
use crate::error::{Error, Result};
use crate::synth;

/// Noise and RIR assets keyed by id. Ids are the file stems on disk.
#[derive(Debug, Clone, Default)]
pub struct AssetBank {
    pub noises: BTreeMap<String, AudioBuffer>,
    pub rirs: BTreeMap<String, AudioBuffer>,
}

impl AssetBank {
    /// Seeded synthetic bank: white, pink and babble noise beds of
    /// `noise_s` seconds and four exponential-decay RIRs.
    pub fn synthetic(seed: u64, sample_rate: u32, noise_s: f64) -> Result<Self> {
        let len = (noise_s * sample_rate as f64).round() as usize;
        let mut bank = Self::default();
        for k in 0..2u64 {
            let s = seed.wrapping_mul(1000).wrapping_add(k);
            bank.noises.insert(format!("white-{k}"), synth::white_noise(s, len, sample_rate)?);
            bank.noises.insert(format!("pink-{k}"), synth::pink_noise(s + 10, len, sample_rate)?);
            bank.noises.insert(format!("babble-{k}"), synth::babble_noise(s + 20, len, sample_rate)?);
        }
        for k in 0..4u64 {
            let s = seed.wrapping_mul(1000).wrapping_add(100 + k);
            bank.rirs.insert(format!("rir-{k}"), synth::room_impulse_response(s, sample_rate)?);
        }
        Ok(bank)
    }

    pub fn noise(&self, id: &str) -> Result<&AudioBuffer> {
        self.noises.get(id).ok_or_else(|| Error::MissingAsset(id.to_string()))
    }

    pub fn rir(&self, id: &str) -> Result<&AudioBuffer> {
        self.rirs.get(id).ok_or_else(|| Error::MissingAsset(id.to_string()))
    }

    /// Asset resampled to `rate` (explicitly; no-op when rates match).
    pub(crate) fn noise_at(&self, id: &str, rate: u32) -> Result<AudioBuffer> {
        resample(self.noise(id)?, rate)
    }

    pub(crate) fn rir_at(&self, id: &str, rate: u32) -> Result<AudioBuffer> {
        resample(self.rir(id)?, rate)
    }

    /// Reads `<dir>/noises/*.wav` and `<dir>/rirs/*.wav`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut bank = Self::default();
        for (sub, map) in [("noises", &mut bank.noises), ("rirs", &mut bank.rirs)] {
            let path = dir.join(sub);
            if !path.is_dir() {
                continue;
            }
            let mut entries: Vec<_> = std::fs::read_dir(&path)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "wav"))
                .collect();
            entries.sort();
            for p in entries {
                let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                map.insert(id, AudioBuffer::read_wav(&p)?);
            }
        }
        Ok(bank)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (sub, map) in [("noises", &self.noises), ("rirs", &self.rirs)] {
            std::fs::create_dir_all(dir.join(sub))?;
            for (id, audio) in map {
                audio.write_wav(dir.join(sub).join(format!("{id}.wav")))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_keeps_ids() {
        let bank = AssetBank::synthetic(2, 16000, 0.1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        bank.save(dir.path()).unwrap();
        let back = AssetBank::load(dir.path()).unwrap();
        assert_eq!(
            back.noises.keys().collect::<Vec<_>>(),
            bank.noises.keys().collect::<Vec<_>>()
        );
        assert_eq!(back.rirs.len(), 4);
    }

    #[test]
    fn missing_id_is_an_error() {
        let bank = AssetBank::default();
        assert!(matches!(bank.noise("nope"), Err(Error::MissingAsset(_))));
    }
}
