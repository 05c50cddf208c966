//! What a forward pass leaves behind for inspection.
//!
//! Struct fields are declared in lexicographic order: serialized traces
//! must have sorted keys.

use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};

use crate::tensor::Tensor;
use crate::tokenizer::TokenId;

const SAMPLE_LEN: usize = 8;

/// Shape plus statistics of a tensor, computed over all of its values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorSummary {
    pub l2_norm: f32,
    pub max: f32,
    pub mean: f32,
    pub min: f32,
    /// The first (up to) eight values.
    pub sample: Vec<f32>,
    pub shape: Vec<usize>,
}

impl TensorSummary {
    pub fn of(t: &Tensor) -> Self {
        let data = t.data();
        let (mut sum, mut sq) = (0.0f64, 0.0f64);
        let (mut min, mut max) = (f32::INFINITY, f32::NEG_INFINITY);
        for &v in data {
            sum += f64::from(v);
            sq += f64::from(v) * f64::from(v);
            min = min.min(v);
            max = max.max(v);
        }
        Self {
            shape: t.shape().to_vec(),
            l2_norm: sq.sqrt() as f32,
            min,
            max,
            mean: (sum / data.len() as f64) as f32,
            sample: data.iter().take(SAMPLE_LEN).copied().collect(),
        }
    }
}

/// A captured intermediate: either the whole tensor or its summary.
#[derive(Debug, Clone, PartialEq)]
pub enum Captured {
    Full(Tensor),
    Summary(TensorSummary),
}

impl Captured {
    pub fn new(t: &Tensor, full: bool) -> Self {
        if full {
            Self::Full(t.clone())
        } else {
            Self::Summary(TensorSummary::of(t))
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Self::Full(t) => t.shape(),
            Self::Summary(s) => &s.shape,
        }
    }

    pub fn as_full(&self) -> Option<&Tensor> {
        match self {
            Self::Full(t) => Some(t),
            Self::Summary(_) => None,
        }
    }

    pub fn is_full(&self) -> bool {
        matches!(self, Self::Full(_))
    }
}

impl Serialize for Captured {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Self::Full(t) => {
                let mut s = serializer.serialize_struct("Captured", 3)?;
                s.serialize_field("data", t.data())?;
                s.serialize_field("kind", "full")?;
                s.serialize_field("shape", t.shape())?;
                s.end()
            }
            Self::Summary(sum) => {
                let mut s = serializer.serialize_struct("Captured", 7)?;
                s.serialize_field("kind", "summary")?;
                s.serialize_field("l2_norm", &sum.l2_norm)?;
                s.serialize_field("max", &sum.max)?;
                s.serialize_field("mean", &sum.mean)?;
                s.serialize_field("min", &sum.min)?;
                s.serialize_field("sample", &sum.sample)?;
                s.serialize_field("shape", &sum.shape)?;
                s.end()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddingTrace {
    pub pos_emb: Captured,
    pub sum: Captured,
    pub token_emb: Captured,
}

/// One attention head. `scores` are scaled and masked, before softmax;
/// `weights` are after softmax.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadTrace {
    pub head: usize,
    pub k: Captured,
    pub output: Captured,
    pub q: Captured,
    pub scores: Captured,
    pub v: Captured,
    pub weights: Captured,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockTrace {
    pub attn_proj_out: Captured,
    pub heads: Vec<HeadTrace>,
    pub index: usize,
    pub ln1_out: Captured,
    pub ln2_out: Captured,
    /// MLP activations after GELU, `[s × d_mlp]`.
    pub mlp_hidden: Captured,
    pub mlp_out: Captured,
    /// Residual stream after the attention sublayer.
    pub resid1: Captured,
    /// Residual stream after the MLP sublayer (the block output).
    pub resid2: Captured,
}

impl BlockTrace {
    pub fn head(&self, head: usize) -> Option<&HeadTrace> {
        self.heads.iter().find(|h| h.head == head)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinalTrace {
    pub ln_f_out: Captured,
    /// Logits at the last position, `[vocab_size]`.
    pub logits: Captured,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ForwardTrace {
    pub blocks: Vec<BlockTrace>,
    pub embedding: Option<EmbeddingTrace>,
    #[serde(rename = "final")]
    pub final_trace: Option<FinalTrace>,
    pub token_ids: Vec<TokenId>,
}

impl ForwardTrace {
    pub fn block(&self, index: usize) -> Option<&BlockTrace> {
        self.blocks.iter().find(|b| b.index == index)
    }

    /// Full attention weights for `(layer, head)`, if they were retained.
    pub fn attention_weights(&self, layer: usize, head: usize) -> Option<&Tensor> {
        self.block(layer)?.head(head)?.weights.as_full()
    }
}
