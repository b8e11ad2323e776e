//! The divided spectro-temporal (DST) attention network, the CRNN baseline,
//! parameter initialization, and checkpoints.

mod checkpoint;
mod config;
mod gradcheck;
mod layers;
mod params;


pub use checkpoint::{Checkpoint, MANIFEST};
pub use gradcheck::tiny_grad_check;
pub use config::{ModelConfig, Variant, INPUT_CHANNELS};
pub use layers::{
    baseline_forward, conv_encoder, dst_block, forward, multihead_self_attention, predict, run, spectral_mhsa,
    temporal_mhsa, AttentionKind, AttentionTrace, ForwardCtx,
};
pub use params::{count_params, init_params, Bound, ParamSet};
