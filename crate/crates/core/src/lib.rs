//! Core of the glassgpt inference engine.
//!
//! Everything needed to run GPT-2 small on user text and look inside while it
//! runs:
//!
//! - [`tokenizer`]: byte-level BPE compatible with the published GPT-2 vocabulary.
//! - [`tensor`]: a small set of deterministic `f32` kernels.
//! - [`weights`]: the single-file checkpoint container and model assembly.
//! - [`model`]: the forward pass, with configurable capture of intermediates.
//! - [`sampler`]: temperature / top-k distributions, sampling, generation.
//! - [`engine`]: tokenizer + model bundled for text-in, predictions-out use.

pub mod engine;
pub mod model;
pub mod sampler;
pub mod tensor;
pub mod tokenizer;
pub mod weights;

pub use engine::Engine;
pub use model::{
    forward, CaptureLevel, Captured, ForwardTrace, ModelError, TensorSummary, TraceCaptureSpec,
};
pub use sampler::{
    generate, probabilities, sample_next, PredictionEntry, PredictionResult, SamplerRng,
    SamplingParams,
};
pub use tensor::{Tensor, TensorError};
pub use tokenizer::{BpeVocab, TokenId, TokenSpan, TokenizerError, END_OF_TEXT};
pub use weights::{BlockWeights, CheckpointError, Gpt2Model, LoadError, ModelConfig};
