//! Differentiable numeric kernel: tensors, a reverse-mode tape, transformer
//! stacks, AdamW, checkpoints and finite-difference gradient checks.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{
    decoder_stack, denoiser_forward, denoiser_stack, encoder_forward, encoder_stack, init_decoder, init_denoiser,
    init_encoder, sinusoid, DenoiseSegment, ParamSource, SeqBatch,
};
pub use optim::AdamW;
pub use params::{ModelConfig, ParameterStore};
pub use tape::{AttnSegment, Grads, Tape, Var};
pub use tensor::Tensor;
