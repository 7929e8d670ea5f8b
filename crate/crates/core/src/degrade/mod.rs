//! Distortion simulation producing (clean, degraded, recipe) pairs.
//!
//! Distortions are applied in a fixed order: reverberation, clipping,
//! band limitation, additive noise.

mod assets;
mod ops;
mod recipe;
mod simulate;

pub use assets::AssetBank;
pub use ops::{apply_bandlimit, apply_clip, apply_reverb, convolve_truncated, mix_noise, MixResult};
pub use recipe::{
    sample_recipe, BandlimitParams, ClipParams, DegradationRecipe, DistortionProbs, NoiseParams,
    ReverbParams, BANDWIDTHS_HZ, CLIP_RANGE, SNR_RANGE_DB,
};
pub use simulate::{read_manifest, simulate_pair, write_manifest, PairRecord, SimulatedPair};
