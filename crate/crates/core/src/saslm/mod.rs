//! Speech language model that reads continuous embeddings of degraded audio
//! as a prefix and autoregressively emits clean semantic tokens.

mod model;
mod train;
mod vocab;

pub use model::{
    masked_cross_entropy, max_len_for, shifted_targets, DecodeMode, Saslm, SaslmConfig, ADAPTER_PREFIX,
    DECODER_PREFIX, ENCODER_PREFIX, MAX_LEN_RATIO,
};
pub use train::{
    batch_forward, train_phase, write_curve, BatchOutput, CurvePoint, Phase, SaslmExample,
    SaslmTrainConfig,
};
pub use crate::nn::OptimConfig;
pub use vocab::{pack_sequence, SaslmSequence, Slot, VocabLayout};
