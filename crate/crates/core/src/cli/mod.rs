//! Configuration, checkpoints and the pipeline stages behind the binary.

mod checkpoint;
mod config;
mod run;

pub use checkpoint::{
    codebook_checkpoint, codebook_from_checkpoint, fmse_checkpoint, fmse_from_checkpoint, saslm_checkpoint,
    saslm_from_checkpoint, Checkpoint, Component, StoredTensor, TensorData, FORMAT_VERSION, MAGIC,
};
pub use config::{
    derive_seed, CorpusConfig, FmseSection, InferSection, PipelineConfig, SaslmSection, SimulateConfig, TokenizerSection,
};
pub use run::{pair_id, EnhanceOptions, LoadedPair, Run, RunDir, TokenRecord, RUN_ROOT_ENV};

use crate::error::Error;

/// Process exit status for an error: 1 usage or configuration, 2 missing
/// input or artifact, 3 numerical failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::MissingArtifact { .. } | Error::MissingAsset(_) => 2,
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 2,
        Error::OdeDiverged { .. } | Error::Numerical(_) => 3,
        _ => 1,
    }
}
