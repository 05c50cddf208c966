//! Tokenizer and model bundled for text-in, predictions-out use.

use std::ops::ControlFlow;
use std::path::Path;

use thiserror::Error;

use crate::model::{forward, ForwardTrace, ModelError, TraceCaptureSpec};
use crate::sampler::{self, Generation, GenerationStep, PredictionResult, SamplerError, SamplingParams};
use crate::tensor::Tensor;
use crate::tokenizer::{BpeVocab, TokenId, TokenSpan, TokenizerError};
use crate::weights::{
    file_sha256, load_model_with_config, read_checkpoint_file, Gpt2Model, LoadError, ModelConfig,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("vocabulary has {vocab} tokens but the model expects {model}")]
    VocabMismatch { vocab: usize, model: usize },
}

/// Where a model came from.
#[derive(Debug, Clone, Default)]
pub struct ModelSource {
    pub path: Option<String>,
    pub sha256: Option<String>,
    /// Checkpoint tensors that the model does not use.
    pub ignored_tensors: Vec<String>,
}

/// Result of running the model on a piece of text.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub tokens: Vec<TokenSpan>,
    /// Last-position logits.
    pub logits: Tensor,
    pub trace: ForwardTrace,
    pub predictions: PredictionResult,
}

#[derive(Debug)]
pub struct Engine {
    pub vocab: BpeVocab,
    pub model: Gpt2Model,
    pub source: ModelSource,
}

impl Engine {
    pub fn new(vocab: BpeVocab, model: Gpt2Model) -> Result<Self, EngineError> {
        if vocab.len() != model.config.vocab_size {
            return Err(EngineError::VocabMismatch {
                vocab: vocab.len(),
                model: model.config.vocab_size,
            });
        }
        Ok(Self {
            vocab,
            model,
            source: ModelSource::default(),
        })
    }

    /// Load a checkpoint file for `config`.
    pub fn load(
        vocab: BpeVocab,
        checkpoint: impl AsRef<Path>,
        config: ModelConfig,
    ) -> Result<Self, EngineError> {
        let path = checkpoint.as_ref();
        let (_, tensors) = read_checkpoint_file(path).map_err(LoadError::from)?;
        let loaded = load_model_with_config(tensors, config)?;
        let sha256 = file_sha256(path).map_err(LoadError::from)?;
        let mut engine = Self::new(vocab, loaded.model)?;
        engine.source = ModelSource {
            path: Some(path.display().to_string()),
            sha256: Some(sha256),
            ignored_tensors: loaded.ignored,
        };
        Ok(engine)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenSpan>, EngineError> {
        Ok(self.vocab.spans(&self.vocab.encode(text))?)
    }

    /// Rank next tokens and label them.
    pub fn predictions(&self, logits: &Tensor, params: &SamplingParams) -> PredictionResult {
        let mut result = sampler::probabilities(logits, params);
        result.label(|id| self.display(id));
        result
    }

    pub fn display(&self, id: TokenId) -> String {
        self.vocab
            .token_display(id)
            .unwrap_or_else(|_| format!("<{id}>"))
    }

    pub fn analyze(
        &self,
        text: &str,
        capture: &TraceCaptureSpec,
        params: &SamplingParams,
    ) -> Result<Analysis, EngineError> {
        params.validate()?;
        let tokens = self.tokenize(text)?;
        let ids: Vec<TokenId> = tokens.iter().map(|t| t.id).collect();
        let (logits, trace) = forward(&self.model, &ids, capture)?;
        let predictions = self.predictions(&logits, params);
        Ok(Analysis {
            tokens,
            logits,
            trace,
            predictions,
        })
    }

    /// Generate from text; `on_step` sees every step with labelled
    /// predictions and may stop the loop.
    pub fn generate(
        &self,
        prompt: &str,
        max_new_tokens: usize,
        params: &SamplingParams,
        mut on_step: impl FnMut(&GenerationStep) -> ControlFlow<()>,
    ) -> Result<Generation, EngineError> {
        let ids = self.vocab.encode(prompt);
        let mut generation =
            sampler::generate_with(&self.model, &ids, max_new_tokens, params, |step| {
                let mut step = step.clone();
                step.prediction.label(|id| self.display(id));
                on_step(&step)
            })?;
        for step in &mut generation.steps {
            step.prediction.label(|id| self.display(id));
        }
        Ok(generation)
    }
}
