//! The toy dual-stream diffusion transformer: input assembly, conditioning,
//! low-rank adapters and the forward pass.

mod config;
mod lora;
mod net;
mod sequence;

pub use config::{ModelConfig, NullReference, RefAttention, SHORT_CONTEXT_ROPE_BASE};
pub use lora::{lora_apply, merge_lora, AdapterSet, LoraAdapter};
pub use net::{timestep_embedding, Bound, Denoiser, ForwardOptions, Model, Prediction, STREAMS};
pub use sequence::{
    assemble_input, assemble_input_with, Conditioning, JointInput, LatentSequence, Modality, Role, TextCode,
};
