//! Next-token distributions, sampling, and the autoregressive loop.
//!
//! Temperature divides the logits before softmax: below 1 it sharpens the
//! distribution, above 1 it flattens it, and it never changes the ranking.
//! `T = 0` is greedy decoding. Ties are always broken towards the lowest
//! token id.

use std::ops::ControlFlow;

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{forward, ModelError, TraceCaptureSpec};
use crate::tensor::Tensor;
use crate::tokenizer::{TokenId, END_OF_TEXT};
use crate::weights::Gpt2Model;

/// Entries shown in a [`PredictionResult`], independent of `top_k`.
pub const DEFAULT_DISPLAY_K: usize = 10;
/// Temperatures accepted from interactive clients.
pub const MAX_UI_TEMPERATURE: f32 = 4.0;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f32),
    #[error("invalid sampling parameters: {0}")]
    InvalidParams(String),
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("max_new_tokens must be at least 1")]
    NoNewTokens,
    #[error("context overflow at step {step}: {prompt_len} prompt tokens + {max_new_tokens} new tokens exceed the {limit}-token context")]
    ContextOverflow {
        step: usize,
        prompt_len: usize,
        max_new_tokens: usize,
        limit: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub seed: u64,
    /// `0` means greedy.
    pub temperature: f32,
    pub top_k: Option<usize>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: None,
            seed: 0,
        }
    }
}

impl SamplingParams {
    pub fn greedy() -> Self {
        Self {
            temperature: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(SamplerError::InvalidParams(format!(
                "temperature must be a finite value >= 0, got {}",
                self.temperature
            )));
        }
        if self.top_k == Some(0) {
            return Err(SamplerError::InvalidParams("top_k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionEntry {
    pub display: String,
    pub logit: f32,
    pub probability: f32,
    pub scaled_logit: f32,
    pub token_id: TokenId,
}

/// Ranked next-token distribution.
///
/// `entries` holds the top [`DEFAULT_DISPLAY_K`] (or requested) tokens for
/// display. Sampling draws from the full support: every token with non-zero
/// probability after temperature scaling and top-k truncation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionResult {
    pub entries: Vec<PredictionEntry>,
    /// Shannon entropy in nats of the sampling distribution.
    pub entropy: f64,
    pub params: SamplingParams,
    #[serde(skip)]
    support: Vec<(TokenId, f64)>,
}

impl PredictionResult {
    /// `(token, probability)` pairs of the sampling distribution, ranked.
    pub fn support(&self) -> &[(TokenId, f64)] {
        &self.support
    }

    pub fn top_token(&self) -> TokenId {
        self.support[0].0
    }

    /// Fill in display labels.
    pub fn label(&mut self, mut display: impl FnMut(TokenId) -> String) {
        for e in &mut self.entries {
            e.display = display(e.token_id);
        }
    }
}

/// `logits / temperature`.
pub fn apply_temperature(logits: &Tensor, temperature: f32) -> Result<Tensor, SamplerError> {
    // Also rejects NaN.
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(SamplerError::NonPositiveTemperature(temperature));
    }
    Ok(logits.map(|z| z / temperature))
}

/// Token order by descending value, ties to the lowest id.
fn ranked(values: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Rank next tokens under `params`, showing [`DEFAULT_DISPLAY_K`] entries.
pub fn probabilities(logits: &Tensor, params: &SamplingParams) -> PredictionResult {
    probabilities_with_display(logits, params, DEFAULT_DISPLAY_K)
}

pub fn probabilities_with_display(
    logits: &Tensor,
    params: &SamplingParams,
    display_k: usize,
) -> PredictionResult {
    let raw = logits.data();
    if params.temperature <= 0.0 {
        let best = ranked(raw)[0];
        return PredictionResult {
            entries: vec![PredictionEntry {
                token_id: best as TokenId,
                display: String::new(),
                logit: raw[best],
                scaled_logit: raw[best],
                probability: 1.0,
            }],
            entropy: 0.0,
            params: *params,
            support: vec![(best as TokenId, 1.0)],
        };
    }

    let scaled = logits.map(|z| z / params.temperature);
    let scaled = scaled.data();
    let order = ranked(scaled);
    let keep = params.top_k.unwrap_or(order.len()).clamp(1, order.len());
    let max = f64::from(scaled[order[0]]);
    let weights: Vec<f64> = order[..keep]
        .iter()
        .map(|&i| (f64::from(scaled[i]) - max).exp())
        .collect();
    let total: f64 = weights.iter().sum();

    let support: Vec<(TokenId, f64)> = order[..keep]
        .iter()
        .zip(&weights)
        .map(|(&i, &w)| (i as TokenId, w / total))
        .filter(|&(_, p)| p > 0.0)
        .collect();
    let entropy = support.iter().map(|&(_, p)| -p * p.ln()).sum::<f64>().max(0.0);
    let entries = support
        .iter()
        .take(display_k.max(1))
        .map(|&(id, p)| PredictionEntry {
            token_id: id,
            display: String::new(),
            logit: raw[id as usize],
            scaled_logit: scaled[id as usize],
            probability: p as f32,
        })
        .collect();
    PredictionResult {
        entries,
        entropy,
        params: *params,
        support,
    }
}

/// Seeded xoshiro256++ stream for one sampling session.
///
/// The 256-bit state is expanded from the 64-bit seed with SplitMix64.
#[derive(Debug, Clone)]
pub struct SamplerRng(Xoshiro256PlusPlus);

impl SamplerRng {
    pub fn new(seed: u64) -> Self {
        Self(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)` from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Draw one token by inverse CDF over the ranked support.
pub fn sample_next(result: &PredictionResult, rng: &mut SamplerRng) -> TokenId {
    let u = rng.next_f64();
    let mut cumulative = 0.0;
    for &(id, p) in &result.support {
        cumulative += p;
        if u < cumulative {
            return id;
        }
    }
    result.support.last().expect("support is never empty").0
}

/// One step of [`generate`].
#[derive(Debug, Clone)]
pub struct GenerationStep {
    pub step: usize,
    pub token_id: TokenId,
    pub prediction: PredictionResult,
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub steps: Vec<GenerationStep>,
    pub stopped_at_end_of_text: bool,
    /// The step callback asked to stop early.
    pub cancelled: bool,
}

pub fn check_generation(
    prompt_len: usize,
    max_new_tokens: usize,
    max_context: usize,
) -> Result<(), SamplerError> {
    if prompt_len == 0 {
        return Err(SamplerError::EmptyPrompt);
    }
    if max_new_tokens == 0 {
        return Err(SamplerError::NoNewTokens);
    }
    if prompt_len + max_new_tokens > max_context {
        return Err(SamplerError::ContextOverflow {
            step: max_context.saturating_sub(prompt_len),
            prompt_len,
            max_new_tokens,
            limit: max_context,
        });
    }
    Ok(())
}

/// Sample up to `max_new_tokens` tokens, one full forward pass per token.
pub fn generate(
    model: &Gpt2Model,
    prompt: &[TokenId],
    max_new_tokens: usize,
    params: &SamplingParams,
) -> Result<Generation, SamplerError> {
    generate_with(model, prompt, max_new_tokens, params, |_| ControlFlow::Continue(()))
}

/// [`generate`], calling `on_step` after each token; `Break` stops early.
pub fn generate_with(
    model: &Gpt2Model,
    prompt: &[TokenId],
    max_new_tokens: usize,
    params: &SamplingParams,
    mut on_step: impl FnMut(&GenerationStep) -> ControlFlow<()>,
) -> Result<Generation, SamplerError> {
    params.validate()?;
    check_generation(prompt.len(), max_new_tokens, model.config.max_context)?;
    let mut rng = SamplerRng::new(params.seed);
    let mut context = prompt.to_vec();
    let mut out = Generation {
        tokens: Vec::new(),
        steps: Vec::new(),
        stopped_at_end_of_text: false,
        cancelled: false,
    };
    for step in 0..max_new_tokens {
        let (logits, _) = forward(model, &context, &TraceCaptureSpec::none())?;
        let prediction = probabilities(&logits, params);
        let token_id = sample_next(&prediction, &mut rng);
        context.push(token_id);
        out.tokens.push(token_id);
        let record = GenerationStep {
            step,
            token_id,
            prediction,
        };
        let flow = on_step(&record);
        out.steps.push(record);
        if token_id == END_OF_TEXT {
            out.stopped_at_end_of_text = true;
            break;
        }
        if flow.is_break() {
            out.cancelled = true;
            break;
        }
    }
    Ok(out)
}
