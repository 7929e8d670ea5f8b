//! Versioned binary container for trained components.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, JSON
//! header, raw little-endian tensor payload, then the SHA-256 of every
//! preceding byte. All integers are little endian.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsp::MelConfig;
use crate::error::{Error, Result};
use crate::fmse::{Fmse, FmseConfig, MelNorm};
use crate::nn::ParamStore;
use crate::saslm::{Saslm, SaslmConfig};
use crate::tokenizer::Codebook;

pub const MAGIC: &[u8; 8] = b"GNHCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Tokenizer,
    Saslm,
    Fmse,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Tokenizer => "tokenizer",
            Component::Saslm => "saslm",
            Component::Fmse => "fmse",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    fn dtype_name(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::F64(_) => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub component: Component,
    /// Snapshot of the configuration the parameters were built with.
    pub config: serde_json::Value,
    pub step: u64,
    pub tensors: BTreeMap<String, StoredTensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    component: Component,
    config: serde_json::Value,
    step: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
}

impl Checkpoint {
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Checkpoint(format!("tensor `{name}` has shape {:?} but {} values", t.shape, t.data.len())));
            }
            let offset = payload.len();
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
            }
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: t.data.dtype_name().into(),
                shape: t.shape.clone(),
                offset,
                bytes: payload.len() - offset,
            });
        }
        let header = serde_json::to_vec(&Header {
            component: self.component,
            config: self.config.clone(),
            step: self.step,
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(MAGIC.len() + 12 + header.len() + payload.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fixed = MAGIC.len() + 12;
        if bytes.len() < fixed + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch; file is corrupted".into()));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = fixed
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Checkpoint("header length out of range".into()))?;
        let header: Header = serde_json::from_slice(&body[fixed..header_end])?;
        let payload = &body[header_end..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let raw = e
                .offset
                .checked_add(e.bytes)
                .and_then(|end| payload.get(e.offset..end))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` out of range", e.name)))?;
            let data = match e.dtype.as_str() {
                "f32" => TensorData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()),
                "f64" => TensorData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()),
                other => return Err(Error::Checkpoint(format!("unknown dtype `{other}`"))),
            };
            if data.len() != e.shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("tensor `{}` size does not match its shape", e.name)));
            }
            tensors.insert(e.name, StoredTensor { shape: e.shape, data });
        }
        Ok(Self {
            component: header.component,
            config: header.config,
            step: header.step,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Load and check the component tag.
    pub fn load_as(path: impl AsRef<Path>, component: Component) -> Result<Self> {
        let ckpt = Self::load(path)?;
        ckpt.expect(component)?;
        Ok(ckpt)
    }

    pub fn expect(&self, component: Component) -> Result<()> {
        if self.component != component {
            return Err(Error::ComponentMismatch {
                expected: component.to_string(),
                found: self.component.to_string(),
            });
        }
        Ok(())
    }

    fn config_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::Checkpoint(format!("bad config snapshot: {e}")))
    }
}

fn store_tensors(store: &ParamStore) -> Result<BTreeMap<String, StoredTensor>> {
    let mut out = BTreeMap::new();
    for (name, t) in store.named_tensors() {
        let shape = t.dims().to_vec();
        let flat = t.flatten_all()?;
        let data = match t.dtype() {
            DType::F64 => TensorData::F64(flat.to_vec1()?),
            _ => TensorData::F32(flat.to_dtype(DType::F32)?.to_vec1()?),
        };
        out.insert(name, StoredTensor { shape, data });
    }
    Ok(out)
}

fn restore_store(store: &ParamStore, tensors: &BTreeMap<String, StoredTensor>) -> Result<()> {
    let mut map = BTreeMap::new();
    for (name, t) in tensors {
        let tensor = match &t.data {
            TensorData::F32(v) => Tensor::from_slice(v, t.shape.as_slice(), &Device::Cpu)?,
            TensorData::F64(v) => Tensor::from_slice(v, t.shape.as_slice(), &Device::Cpu)?,
        };
        map.insert(name.clone(), tensor);
    }
    store
        .assign(&map)
        .map_err(|e| Error::Checkpoint(format!("parameters do not fit the configured model: {e}")))
}

fn stored_dtype(tensors: &BTreeMap<String, StoredTensor>) -> DType {
    match tensors.values().next().map(|t| &t.data) {
        Some(TensorData::F64(_)) => DType::F64,
        _ => DType::F32,
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenizerSnapshot {
    version: String,
    k: usize,
    dim: usize,
    frame_rate: f64,
    mel: MelConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FmseSnapshot {
    model: FmseConfig,
    norm: MelNorm,
    mel: MelConfig,
}

pub fn codebook_checkpoint(cb: &Codebook) -> Result<Checkpoint> {
    let snapshot = TokenizerSnapshot {
        version: cb.version.clone(),
        k: cb.k(),
        dim: cb.dim(),
        frame_rate: cb.mel.frame_rate(),
        mel: cb.mel.clone(),
    };
    let mut tensors = BTreeMap::new();
    tensors.insert(
        "centroids".to_string(),
        StoredTensor {
            shape: vec![cb.k(), cb.dim()],
            data: TensorData::F64(cb.centroids.iter().copied().collect()),
        },
    );
    Ok(Checkpoint {
        component: Component::Tokenizer,
        config: serde_json::to_value(snapshot)?,
        step: 0,
        tensors,
    })
}

pub fn codebook_from_checkpoint(ckpt: &Checkpoint) -> Result<Codebook> {
    ckpt.expect(Component::Tokenizer)?;
    let s: TokenizerSnapshot = ckpt.config_as()?;
    let c = ckpt
        .tensors
        .get("centroids")
        .ok_or_else(|| Error::Checkpoint("tokenizer checkpoint has no centroids".into()))?;
    let TensorData::F64(v) = &c.data else {
        return Err(Error::Checkpoint("centroids must be stored as f64".into()));
    };
    if c.shape != [s.k, s.dim] {
        return Err(Error::Checkpoint("centroid shape disagrees with header".into()));
    }
    Ok(Codebook {
        centroids: Array2::from_shape_vec((s.k, s.dim), v.clone()).map_err(|e| Error::Shape(e.to_string()))?,
        version: s.version,
        mel: s.mel,
    })
}

pub fn saslm_checkpoint(model: &Saslm) -> Result<Checkpoint> {
    Ok(Checkpoint {
        component: Component::Saslm,
        config: serde_json::to_value(&model.cfg)?,
        step: model.steps_trained,
        tensors: store_tensors(&model.store)?,
    })
}

pub fn saslm_from_checkpoint(ckpt: &Checkpoint) -> Result<Saslm> {
    ckpt.expect(Component::Saslm)?;
    let cfg: SaslmConfig = ckpt.config_as()?;
    let mut model = Saslm::new(cfg, 0, stored_dtype(&ckpt.tensors))?;
    restore_store(&model.store, &ckpt.tensors)?;
    model.steps_trained = ckpt.step;
    Ok(model)
}

pub fn fmse_checkpoint(model: &Fmse, mel: &MelConfig) -> Result<Checkpoint> {
    let snapshot = FmseSnapshot {
        model: model.cfg.clone(),
        norm: model.norm,
        mel: mel.clone(),
    };
    Ok(Checkpoint {
        component: Component::Fmse,
        config: serde_json::to_value(snapshot)?,
        step: model.steps_trained,
        tensors: store_tensors(&model.store)?,
    })
}

/// Restore the flow model together with the mel profile it was trained on.
pub fn fmse_from_checkpoint(ckpt: &Checkpoint) -> Result<(Fmse, MelConfig)> {
    ckpt.expect(Component::Fmse)?;
    let s: FmseSnapshot = ckpt.config_as()?;
    let mut model = Fmse::new(s.model, 0, stored_dtype(&ckpt.tensors))?;
    restore_store(&model.store, &ckpt.tensors)?;
    model.steps_trained = ckpt.step;
    model.norm = s.norm;
    Ok((model, s.mel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use crate::tokenizer::train_codebook;

    fn tiny_saslm() -> Saslm {
        let cfg = SaslmConfig {
            k: 8,
            n_mels: 80,
            hidden: 16,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            mlp_ratio: 2,
            max_positions: 64,
        };
        Saslm::new(cfg, 5, DType::F32).unwrap()
    }

    fn tiny_fmse() -> Fmse {
        let cfg = FmseConfig {
            k: 8,
            n_mels: 100,
            hidden: 16,
            heads: 2,
            layers: 1,
            mlp_ratio: 2,
            token_dim: 8,
            token_blocks: 1,
            token_kernel: 3,
            max_positions: 64,
        };
        Fmse::new(cfg, 6, DType::F32).unwrap()
    }

    #[test]
    fn saslm_round_trip_is_bit_exact() {
        let mut m = tiny_saslm();
        m.steps_trained = 42;
        let ckpt = saslm_checkpoint(&m).unwrap();
        assert_eq!(ckpt.param_count(), m.cfg.param_count());
        let bytes = ckpt.to_bytes().unwrap();
        let loaded = saslm_from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(loaded.steps_trained, 42);
        let again = saslm_checkpoint(&loaded).unwrap().to_bytes().unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn fmse_round_trip_keeps_norm_and_profile() {
        let mut m = tiny_fmse();
        m.norm = MelNorm { mean: -3.25, std: 1.5 };
        let ckpt = fmse_checkpoint(&m, &MelConfig::acoustic()).unwrap();
        assert_eq!(ckpt.param_count(), m.cfg.param_count());
        let bytes = ckpt.to_bytes().unwrap();
        let (loaded, mel) = fmse_from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(loaded.norm, m.norm);
        assert_eq!(mel, MelConfig::acoustic());
        assert_eq!(fmse_checkpoint(&loaded, &mel).unwrap().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn codebook_round_trip() {
        let audio: Vec<_> = (0..2)
            .map(|i| synth::utterance(i, synth::Speaker::from_seed(i), 1.0, 16000).unwrap())
            .collect();
        let cb = train_codebook(&audio, 4, 0, &MelConfig::tokenizer()).unwrap();
        let bytes = codebook_checkpoint(&cb).unwrap().to_bytes().unwrap();
        let back = codebook_from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, cb);
    }

    #[test]
    fn wrong_component_is_typed_error() {
        let bytes = saslm_checkpoint(&tiny_saslm()).unwrap().to_bytes().unwrap();
        let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(matches!(fmse_from_checkpoint(&ckpt), Err(Error::ComponentMismatch { .. })));
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = saslm_checkpoint(&tiny_saslm()).unwrap().to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn version_mismatch_reported() {
        let mut bytes = saslm_checkpoint(&tiny_saslm()).unwrap().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::VersionMismatch { expected: 1, found: 7 })
        ));
    }

    #[test]
    fn garbage_rejected() {
        assert!(Checkpoint::from_bytes(b"hello").is_err());
    }
}
