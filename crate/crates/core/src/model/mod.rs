//! The traced GPT-2 forward pass.
//!
//! embeddings → `n_layer` pre-LayerNorm blocks (causal multi-head attention,
//! then MLP, each added back into the residual stream) → final LayerNorm →
//! logits against the tied token embedding.
//!
//! Computation never depends on the [`TraceCaptureSpec`]: every intermediate
//! is produced the same way and then either kept, summarized, or dropped.

mod trace;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, Tensor, TensorError};
use crate::tokenizer::TokenId;
use crate::weights::{BlockWeights, Gpt2Model, ModelConfig};

pub use trace::{
    BlockTrace, Captured, EmbeddingTrace, FinalTrace, ForwardTrace, HeadTrace, TensorSummary,
};

/// Additive mask applied to scores above the diagonal before softmax.
pub const MASK_VALUE: f32 = -1e10;

/// Attention matrices are kept in full for at most this many positions
/// unless the capture spec says otherwise.
pub const DEFAULT_POSITIONS_LIMIT: usize = 64;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty token sequence")]
    EmptySequence,
    #[error("sequence of {len} tokens exceeds the context limit of {limit}")]
    ContextOverflow { len: usize, limit: usize },
    #[error("token id {id} at position {position} is outside the vocabulary (size {vocab_size})")]
    InvalidToken {
        id: TokenId,
        position: usize,
        vocab_size: usize,
    },
    #[error("invalid capture spec: {0}")]
    InvalidCapture(String),
    #[error("{stage}: {source}")]
    Kernel {
        stage: String,
        #[source]
        source: TensorError,
    },
}

trait Stage<T> {
    fn at(self, stage: impl FnOnce() -> String) -> Result<T, ModelError>;
}

impl<T> Stage<T> for Result<T, TensorError> {
    fn at(self, stage: impl FnOnce() -> String) -> Result<T, ModelError> {
        self.map_err(|source| ModelError::Kernel {
            stage: stage(),
            source,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptureLevel {
    /// Keep nothing but the logits.
    None,
    /// Summaries of everything, plus one full attention-weight matrix.
    #[default]
    Summary,
    /// Full tensors for the selected layers and heads.
    Full,
}

impl std::str::FromStr for CaptureLevel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "summary" => Ok(Self::Summary),
            "full" => Ok(Self::Full),
            other => Err(format!("unknown capture level {other:?} (none|summary|full)")),
        }
    }
}

/// Which intermediates a forward pass retains.
///
/// With [`CaptureLevel::Summary`], the attention weights of one exemplar
/// head (the first listed layer and head, default `(0, 0)`) are kept in full.
/// With [`CaptureLevel::Full`], the listed layers (default: all) are kept in
/// full, and within them the listed heads (default: all); everything else is
/// summarized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceCaptureSpec {
    pub level: CaptureLevel,
    pub layers: Option<Vec<usize>>,
    pub heads: Option<Vec<usize>>,
    pub positions_limit: usize,
}

impl Default for TraceCaptureSpec {
    fn default() -> Self {
        Self::summary()
    }
}

impl TraceCaptureSpec {
    pub fn none() -> Self {
        Self {
            level: CaptureLevel::None,
            layers: None,
            heads: None,
            positions_limit: DEFAULT_POSITIONS_LIMIT,
        }
    }

    pub fn summary() -> Self {
        Self {
            level: CaptureLevel::Summary,
            ..Self::none()
        }
    }

    /// Everything, all layers and heads.
    pub fn full() -> Self {
        Self {
            level: CaptureLevel::Full,
            layers: None,
            heads: None,
            positions_limit: usize::MAX,
        }
    }

    /// Full capture of a single layer and head.
    pub fn full_head(layer: usize, head: usize) -> Self {
        Self {
            layers: Some(vec![layer]),
            heads: Some(vec![head]),
            ..Self::full()
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        if self.positions_limit == 0 {
            return Err(ModelError::InvalidCapture(
                "positions_limit must be at least 1".into(),
            ));
        }
        for (what, list, bound) in [
            ("layer", &self.layers, cfg.n_layer),
            ("head", &self.heads, cfg.n_head),
        ] {
            if let Some(bad) = list.iter().flatten().find(|&&i| i >= bound) {
                return Err(ModelError::InvalidCapture(format!(
                    "{what} {bad} out of range (0..{bound})"
                )));
            }
        }
        Ok(())
    }

    fn exemplar(&self) -> (usize, usize) {
        let first = |l: &Option<Vec<usize>>| l.as_ref().and_then(|v| v.first().copied()).unwrap_or(0);
        (first(&self.layers), first(&self.heads))
    }

    fn layer_full(&self, layer: usize) -> bool {
        self.level == CaptureLevel::Full && self.layers.as_ref().map_or(true, |l| l.contains(&layer))
    }

    fn head_full(&self, layer: usize, head: usize) -> bool {
        self.layer_full(layer) && self.heads.as_ref().map_or(true, |h| h.contains(&head))
    }

    fn weights_full(&self, layer: usize, head: usize, seq_len: usize) -> bool {
        let selected = match self.level {
            CaptureLevel::None => false,
            CaptureLevel::Summary => self.exemplar() == (layer, head),
            CaptureLevel::Full => self.head_full(layer, head),
        };
        selected && seq_len <= self.positions_limit
    }
}

/// Row `i` = `wte[ids[i]] + wpe[i]`.
pub fn embed(model: &Gpt2Model, ids: &[TokenId]) -> Result<Tensor, ModelError> {
    Ok(embed_parts(model, ids)?.2)
}

fn embed_parts(model: &Gpt2Model, ids: &[TokenId]) -> Result<(Tensor, Tensor, Tensor), ModelError> {
    let cfg = &model.config;
    check_ids(cfg, ids)?;
    let d = cfg.d_model;
    let mut tok = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        tok.extend_from_slice(model.wte.row(id as usize));
    }
    let tok = Tensor::new(vec![ids.len(), d], tok).at(|| "embed".into())?;
    let pos = model.wpe.slice_rows(0, ids.len()).at(|| "embed".into())?;
    let sum = tok.add(&pos).at(|| "embed".into())?;
    Ok((tok, pos, sum))
}

fn check_ids(cfg: &ModelConfig, ids: &[TokenId]) -> Result<(), ModelError> {
    if ids.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    if ids.len() > cfg.max_context {
        return Err(ModelError::ContextOverflow {
            len: ids.len(),
            limit: cfg.max_context,
        });
    }
    if let Some((position, &id)) = ids
        .iter()
        .enumerate()
        .find(|(_, &id)| id as usize >= cfg.vocab_size)
    {
        return Err(ModelError::InvalidToken {
            id,
            position,
            vocab_size: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Every intermediate of one attention head.
#[derive(Debug, Clone)]
pub struct HeadParts {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub scores: Tensor,
    pub weights: Tensor,
    pub output: Tensor,
}

/// Every intermediate of the attention sublayer.
#[derive(Debug, Clone)]
pub struct AttentionParts {
    pub ln1_out: Tensor,
    pub heads: Vec<HeadParts>,
    pub proj_out: Tensor,
    /// `x + proj_out`.
    pub output: Tensor,
}

/// Causal multi-head self-attention sublayer with its residual add.
pub fn attention_sublayer(
    x: &Tensor,
    w: &BlockWeights,
    cfg: &ModelConfig,
) -> Result<AttentionParts, ModelError> {
    let (s, d) = x.dims2("attention").at(|| "attention".into())?;
    let dh = cfg.d_head;
    let ln1_out = tensor::layer_norm(x, &w.ln1_gamma, &w.ln1_beta, cfg.ln_eps).at(|| "ln_1".into())?;
    let qkv = tensor::linear(&ln1_out, &w.w_qkv, &w.b_qkv).at(|| "c_attn".into())?;
    let scale = (dh as f32).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_head);
    for h in 0..cfg.n_head {
        let stage = || format!("attention head {h}");
        let q = qkv.slice_cols(h * dh, (h + 1) * dh).at(stage)?;
        let k = qkv.slice_cols(d + h * dh, d + (h + 1) * dh).at(stage)?;
        let v = qkv.slice_cols(2 * d + h * dh, 2 * d + (h + 1) * dh).at(stage)?;
        let raw = tensor::matmul_transposed(&q, &k).at(stage)?;
        let mut scores = raw.into_data();
        for i in 0..s {
            for j in 0..s {
                let idx = i * s + j;
                scores[idx] = if j > i { MASK_VALUE } else { scores[idx] / scale };
            }
        }
        let scores = Tensor::new(vec![s, s], scores).at(stage)?;
        let mut weights = tensor::softmax(&scores).into_data();
        for i in 0..s {
            for j in i + 1..s {
                weights[i * s + j] = 0.0;
            }
        }
        let weights = Tensor::new(vec![s, s], weights).at(stage)?;
        let output = tensor::matmul(&weights, &v).at(stage)?;
        heads.push(HeadParts {
            q,
            k,
            v,
            scores,
            weights,
            output,
        });
    }
    let outputs: Vec<Tensor> = heads.iter().map(|h| h.output.clone()).collect();
    let merged = Tensor::concat_cols(&outputs).at(|| "attention merge".into())?;
    let proj_out = tensor::linear(&merged, &w.w_proj, &w.b_proj).at(|| "attn c_proj".into())?;
    let output = x.add(&proj_out).at(|| "attention residual".into())?;
    Ok(AttentionParts {
        ln1_out,
        heads,
        proj_out,
        output,
    })
}

/// Attention sublayer of block `layer`, returning its output and the trace
/// fragment selected by `capture`.
pub fn attention_block(
    x: &Tensor,
    w: &BlockWeights,
    cfg: &ModelConfig,
    layer: usize,
    capture: &TraceCaptureSpec,
) -> Result<(Tensor, Vec<HeadTrace>), ModelError> {
    let parts = attention_sublayer(x, w, cfg)?;
    let s = x.shape()[0];
    let heads = capture_heads(&parts, layer, s, capture);
    Ok((parts.output, heads))
}

fn capture_heads(
    parts: &AttentionParts,
    layer: usize,
    s: usize,
    capture: &TraceCaptureSpec,
) -> Vec<HeadTrace> {
    if capture.level == CaptureLevel::None {
        return Vec::new();
    }
    parts
        .heads
        .iter()
        .enumerate()
        .map(|(h, p)| {
            let full = capture.head_full(layer, h);
            let matrices = capture.weights_full(layer, h, s);
            HeadTrace {
                head: h,
                q: Captured::new(&p.q, full),
                k: Captured::new(&p.k, full),
                v: Captured::new(&p.v, full),
                scores: Captured::new(&p.scores, full && matrices),
                weights: Captured::new(&p.weights, matrices),
                output: Captured::new(&p.output, full),
            }
        })
        .collect()
}

/// Every intermediate of the MLP sublayer.
#[derive(Debug, Clone)]
pub struct MlpParts {
    pub ln2_out: Tensor,
    /// After GELU.
    pub hidden: Tensor,
    pub mlp_out: Tensor,
    /// `x + mlp_out`.
    pub output: Tensor,
}

pub fn mlp_sublayer(x: &Tensor, w: &BlockWeights, cfg: &ModelConfig) -> Result<MlpParts, ModelError> {
    let ln2_out = tensor::layer_norm(x, &w.ln2_gamma, &w.ln2_beta, cfg.ln_eps).at(|| "ln_2".into())?;
    let pre = tensor::linear(&ln2_out, &w.w_fc, &w.b_fc).at(|| "c_fc".into())?;
    let hidden = tensor::gelu(&pre)
        .check_finite("gelu")
        .at(|| "gelu".into())?;
    let mlp_out = tensor::linear(&hidden, &w.w_out, &w.b_out).at(|| "mlp c_proj".into())?;
    let output = x.add(&mlp_out).at(|| "mlp residual".into())?;
    Ok(MlpParts {
        ln2_out,
        hidden,
        mlp_out,
        output,
    })
}

/// `x + W_out·gelu(W_fc·LN₂(x) + b_fc) + b_out`.
pub fn mlp_block(x: &Tensor, w: &BlockWeights, cfg: &ModelConfig) -> Result<Tensor, ModelError> {
    Ok(mlp_sublayer(x, w, cfg)?.output)
}

/// Run the whole model on `ids`; returns last-position logits `[vocab_size]`
/// and the trace selected by `capture`.
pub fn forward(
    model: &Gpt2Model,
    ids: &[TokenId],
    capture: &TraceCaptureSpec,
) -> Result<(Tensor, ForwardTrace), ModelError> {
    let cfg = &model.config;
    capture.validate(cfg)?;
    let (tok, pos, mut x) = embed_parts(model, ids)?;
    let s = ids.len();
    let keep = capture.level != CaptureLevel::None;
    let embed_full = capture.level == CaptureLevel::Full;

    let mut trace = ForwardTrace {
        token_ids: ids.to_vec(),
        embedding: keep.then(|| EmbeddingTrace {
            token_emb: Captured::new(&tok, embed_full),
            pos_emb: Captured::new(&pos, embed_full),
            sum: Captured::new(&x, embed_full),
        }),
        ..ForwardTrace::default()
    };

    for (layer, w) in model.blocks.iter().enumerate() {
        let attn = attention_sublayer(&x, w, cfg)?;
        let mlp = mlp_sublayer(&attn.output, w, cfg)?;
        if keep {
            let full = capture.layer_full(layer);
            trace.blocks.push(BlockTrace {
                index: layer,
                ln1_out: Captured::new(&attn.ln1_out, full),
                heads: capture_heads(&attn, layer, s, capture),
                attn_proj_out: Captured::new(&attn.proj_out, full),
                resid1: Captured::new(&attn.output, full),
                ln2_out: Captured::new(&mlp.ln2_out, full),
                mlp_hidden: Captured::new(&mlp.hidden, full),
                mlp_out: Captured::new(&mlp.mlp_out, full),
                resid2: Captured::new(&mlp.output, full),
            });
        }
        x = mlp.output;
    }

    let ln_f_out = tensor::layer_norm(&x, &model.ln_f_gamma, &model.ln_f_beta, cfg.ln_eps)
        .at(|| "ln_f".into())?;
    let last = ln_f_out.slice_rows(s - 1, s).at(|| "logits".into())?;
    let logits = tensor::matmul_transposed(&last, &model.wte)
        .and_then(|l| l.reshape(vec![cfg.vocab_size]))
        .at(|| "logits".into())?;
    if keep {
        trace.final_trace = Some(FinalTrace {
            ln_f_out: Captured::new(&ln_f_out, embed_full),
            logits: Captured::new(&logits, embed_full),
        });
    }
    Ok((logits, trace))
}
