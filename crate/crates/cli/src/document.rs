//! The JSON document a forward pass produces for clients.

use std::time::Instant;

use glassgpt_core::engine::{Engine, EngineError};
use glassgpt_core::{forward, ForwardTrace, ModelConfig, PredictionResult, SamplingParams, TokenId, TokenSpan, TraceCaptureSpec};
use serde::Serialize;

/// Bumped on any incompatible change to [`TraceDocument`].
pub const TRACE_VERSION: u32 = 1;

/// Wall-clock milliseconds per stage.
#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub forward_ms: f64,
    pub predict_ms: f64,
    pub tokenize_ms: f64,
    pub total_ms: f64,
}

/// Fields are in lexicographic order so the JSON has sorted keys.
#[derive(Debug, Clone, Serialize)]
pub struct TraceDocument {
    pub config: ModelConfig,
    pub predictions: PredictionResult,
    pub timing: Timing,
    pub tokens: Vec<TokenSpan>,
    pub trace: ForwardTrace,
    pub trace_version: u32,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Tokenize `prompt`, run the model and rank the next token.
pub fn trace_prompt(
    engine: &Engine,
    prompt: &str,
    capture: &TraceCaptureSpec,
    params: &SamplingParams,
) -> Result<TraceDocument, EngineError> {
    let start = Instant::now();
    let tokens = engine.tokenize(prompt)?;
    let tokenize_ms = ms(start);
    let ids: Vec<TokenId> = tokens.iter().map(|t| t.id).collect();

    let t = Instant::now();
    let (logits, trace) = forward(&engine.model, &ids, capture)?;
    let forward_ms = ms(t);

    let t = Instant::now();
    let predictions = engine.predictions(&logits, params);
    let predict_ms = ms(t);

    Ok(TraceDocument {
        config: *engine.config(),
        predictions,
        timing: Timing {
            forward_ms,
            predict_ms,
            tokenize_ms,
            total_ms: ms(start),
        },
        tokens,
        trace,
        trace_version: TRACE_VERSION,
    })
}
