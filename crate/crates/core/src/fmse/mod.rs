//! Flow-matching mel infilling: condition assembly, masking, the velocity
//! network and its training loop.

mod condition;
mod flow;
mod masks;
mod model;

pub use condition::{flow_interpolate, net_inputs, tensor_to_mels, Ablation, ConditionBundle, FlowSample, MelNorm};
pub use flow::{
    build_flow_batch, cfm_loss, gaussian, sample_flow_item, train_fmse, write_flow_curve, FlowBatch, FlowCurvePoint,
    FlowItem, FmseExample, FmseTrainConfig,
};
pub use masks::{sample_masks, MaskConfig, MaskSpec};
pub use model::{masked_mse, pad_tokens, Fmse, FmseConfig, NetInputs};
