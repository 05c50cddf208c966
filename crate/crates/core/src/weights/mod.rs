//! Checkpoint I/O and assembly of a validated, immutable [`Gpt2Model`].

pub mod checkpoint;
pub mod synthetic;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub use checkpoint::{
    file_sha256, read_checkpoint, read_checkpoint_file, write_checkpoint, CheckpointError,
    CheckpointIndex, Dtype, IndexEntry, TensorMap,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_head: usize,
    pub d_mlp: usize,
    pub d_model: usize,
    pub ln_eps: f32,
    pub max_context: usize,
    pub n_head: usize,
    pub n_layer: usize,
    pub vocab_size: usize,
}

impl ModelConfig {
    /// GPT-2 small, as published.
    pub const GPT2_SMALL: Self = Self {
        n_layer: 12,
        n_head: 12,
        d_model: 768,
        d_head: 64,
        d_mlp: 3072,
        vocab_size: 50257,
        max_context: 1024,
        ln_eps: 1e-5,
    };

    pub fn new(
        n_layer: usize,
        n_head: usize,
        d_model: usize,
        d_mlp: usize,
        vocab_size: usize,
        max_context: usize,
    ) -> Result<Self, LoadError> {
        let cfg = Self {
            n_layer,
            n_head,
            d_model,
            d_head: d_model.checked_div(n_head).unwrap_or(0),
            d_mlp,
            vocab_size,
            max_context,
            ln_eps: 1e-5,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), LoadError> {
        let extents = [
            self.n_layer,
            self.n_head,
            self.d_model,
            self.d_head,
            self.d_mlp,
            self.vocab_size,
            self.max_context,
        ];
        if extents.contains(&0) || self.n_head * self.d_head != self.d_model || self.ln_eps <= 0.0
        {
            return Err(LoadError::InvalidConfig(*self));
        }
        Ok(())
    }

    /// Read a HuggingFace-style `config.json` (`n_layer`, `n_head`, `n_embd`,
    /// `n_positions`, `vocab_size`, optional `n_inner`, `layer_norm_epsilon`).
    pub fn from_hf_json(json: &str) -> Result<Self, LoadError> {
        #[derive(Deserialize)]
        struct Hf {
            n_layer: usize,
            n_head: usize,
            n_embd: usize,
            n_positions: usize,
            vocab_size: usize,
            n_inner: Option<usize>,
            layer_norm_epsilon: Option<f32>,
        }
        let hf: Hf =
            serde_json::from_str(json).map_err(|e| LoadError::ConfigJson(e.to_string()))?;
        let mut cfg = Self::new(
            hf.n_layer,
            hf.n_head,
            hf.n_embd,
            hf.n_inner.unwrap_or(4 * hf.n_embd),
            hf.vocab_size,
            hf.n_positions,
        )?;
        if let Some(eps) = hf.layer_norm_epsilon {
            cfg.ln_eps = eps;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Expected shape of every tensor in a checkpoint for this config.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![
            ("wte.weight".to_string(), vec![self.vocab_size, self.d_model]),
            ("wpe.weight".to_string(), vec![self.max_context, self.d_model]),
        ];
        for layer in 0..self.n_layer {
            for slot in BlockSlot::ALL {
                out.push((slot.tensor_name(layer), slot.shape(self)));
            }
        }
        out.push(("ln_f.weight".to_string(), vec![self.d_model]));
        out.push(("ln_f.bias".to_string(), vec![self.d_model]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensor_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?}: shape mismatch, expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {0:?}: separate output projection is not supported; logits are tied to wte")]
    UntiedHead(String),
    #[error("invalid model config {0:?}")]
    InvalidConfig(ModelConfig),
    #[error("config.json: {0}")]
    ConfigJson(String),
}

/// Weights of one transformer block. Linear weights are `[d_in × d_out]`.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w_qkv: Tensor,
    pub b_qkv: Tensor,
    pub w_proj: Tensor,
    pub b_proj: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w_fc: Tensor,
    pub b_fc: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

/// Field of [`BlockWeights`] and the checkpoint name / shape it comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlockSlot {
    Ln1Gamma,
    Ln1Beta,
    WQkv,
    BQkv,
    WProj,
    BProj,
    Ln2Gamma,
    Ln2Beta,
    WFc,
    BFc,
    WOut,
    BOut,
}

impl BlockSlot {
    const ALL: [Self; 12] = [
        Self::Ln1Gamma,
        Self::Ln1Beta,
        Self::WQkv,
        Self::BQkv,
        Self::WProj,
        Self::BProj,
        Self::Ln2Gamma,
        Self::Ln2Beta,
        Self::WFc,
        Self::BFc,
        Self::WOut,
        Self::BOut,
    ];

    fn suffix(self) -> &'static str {
        match self {
            Self::Ln1Gamma => "ln_1.weight",
            Self::Ln1Beta => "ln_1.bias",
            Self::WQkv => "attn.c_attn.weight",
            Self::BQkv => "attn.c_attn.bias",
            Self::WProj => "attn.c_proj.weight",
            Self::BProj => "attn.c_proj.bias",
            Self::Ln2Gamma => "ln_2.weight",
            Self::Ln2Beta => "ln_2.bias",
            Self::WFc => "mlp.c_fc.weight",
            Self::BFc => "mlp.c_fc.bias",
            Self::WOut => "mlp.c_proj.weight",
            Self::BOut => "mlp.c_proj.bias",
        }
    }

    fn tensor_name(self, layer: usize) -> String {
        format!("h.{layer}.{}", self.suffix())
    }

    fn shape(self, c: &ModelConfig) -> Vec<usize> {
        let d = c.d_model;
        match self {
            Self::Ln1Gamma | Self::Ln1Beta | Self::Ln2Gamma | Self::Ln2Beta => vec![d],
            Self::BProj | Self::BOut => vec![d],
            Self::WQkv => vec![d, 3 * d],
            Self::BQkv => vec![3 * d],
            Self::WProj => vec![d, d],
            Self::WFc => vec![d, c.d_mlp],
            Self::BFc => vec![c.d_mlp],
            Self::WOut => vec![c.d_mlp, d],
        }
    }
}

/// Immutable GPT-2 weights. Logits reuse `wte` (weight tying).
#[derive(Debug, Clone)]
pub struct Gpt2Model {
    pub config: ModelConfig,
    pub wte: Tensor,
    pub wpe: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub ln_f_gamma: Tensor,
    pub ln_f_beta: Tensor,
}

impl Gpt2Model {
    pub fn parameter_count(&self) -> usize {
        let blocks: usize = self
            .blocks
            .iter()
            .map(|b| {
                [
                    &b.ln1_gamma,
                    &b.ln1_beta,
                    &b.w_qkv,
                    &b.b_qkv,
                    &b.w_proj,
                    &b.b_proj,
                    &b.ln2_gamma,
                    &b.ln2_beta,
                    &b.w_fc,
                    &b.b_fc,
                    &b.w_out,
                    &b.b_out,
                ]
                .iter()
                .map(|t| t.len())
                .sum::<usize>()
            })
            .sum();
        self.wte.len() + self.wpe.len() + blocks + self.ln_f_gamma.len() + self.ln_f_beta.len()
    }

    /// Every tensor under its canonical checkpoint name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("wte.weight".to_string(), &self.wte),
            ("wpe.weight".to_string(), &self.wpe),
        ];
        for (layer, b) in self.blocks.iter().enumerate() {
            for slot in BlockSlot::ALL {
                let t = match slot {
                    BlockSlot::Ln1Gamma => &b.ln1_gamma,
                    BlockSlot::Ln1Beta => &b.ln1_beta,
                    BlockSlot::WQkv => &b.w_qkv,
                    BlockSlot::BQkv => &b.b_qkv,
                    BlockSlot::WProj => &b.w_proj,
                    BlockSlot::BProj => &b.b_proj,
                    BlockSlot::Ln2Gamma => &b.ln2_gamma,
                    BlockSlot::Ln2Beta => &b.ln2_beta,
                    BlockSlot::WFc => &b.w_fc,
                    BlockSlot::BFc => &b.b_fc,
                    BlockSlot::WOut => &b.w_out,
                    BlockSlot::BOut => &b.b_out,
                };
                out.push((slot.tensor_name(layer), t));
            }
        }
        out.push(("ln_f.weight".to_string(), &self.ln_f_gamma));
        out.push(("ln_f.bias".to_string(), &self.ln_f_beta));
        out
    }
}

/// A loaded model plus the names of checkpoint tensors that were not used.
#[derive(Debug)]
pub struct LoadedModel {
    pub model: Gpt2Model,
    pub ignored: Vec<String>,
}

/// Assemble GPT-2 small from a tensor map.
pub fn load_model(tensors: TensorMap) -> Result<LoadedModel, LoadError> {
    load_model_with_config(tensors, ModelConfig::GPT2_SMALL)
}

/// Assemble a model of the given shape from a tensor map.
///
/// Linear weights are stored `[d_in × d_out]` (the 1-D convolution layout),
/// already oriented for `x · W`; the shape check enforces that no transpose
/// is needed.
pub fn load_model_with_config(
    mut tensors: TensorMap,
    config: ModelConfig,
) -> Result<LoadedModel, LoadError> {
    config.validate()?;
    if let Some(name) = ["lm_head.weight", "lm_head.bias"]
        .into_iter()
        .find(|n| tensors.contains_key(*n))
    {
        return Err(LoadError::UntiedHead(name.to_string()));
    }
    let mut take = |name: &str, shape: Vec<usize>| -> Result<Tensor, LoadError> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| LoadError::MissingTensor(name.to_string()))?;
        if t.shape() != shape.as_slice() {
            return Err(LoadError::ShapeMismatch {
                name: name.to_string(),
                expected: shape,
                found: t.shape().to_vec(),
            });
        }
        Ok(t)
    };
    let d = config.d_model;
    let wte = take("wte.weight", vec![config.vocab_size, d])?;
    let wpe = take("wpe.weight", vec![config.max_context, d])?;
    let mut blocks = Vec::with_capacity(config.n_layer);
    for layer in 0..config.n_layer {
        let mut get = |slot: BlockSlot| take(&slot.tensor_name(layer), slot.shape(&config));
        blocks.push(BlockWeights {
            ln1_gamma: get(BlockSlot::Ln1Gamma)?,
            ln1_beta: get(BlockSlot::Ln1Beta)?,
            w_qkv: get(BlockSlot::WQkv)?,
            b_qkv: get(BlockSlot::BQkv)?,
            w_proj: get(BlockSlot::WProj)?,
            b_proj: get(BlockSlot::BProj)?,
            ln2_gamma: get(BlockSlot::Ln2Gamma)?,
            ln2_beta: get(BlockSlot::Ln2Beta)?,
            w_fc: get(BlockSlot::WFc)?,
            b_fc: get(BlockSlot::BFc)?,
            w_out: get(BlockSlot::WOut)?,
            b_out: get(BlockSlot::BOut)?,
        });
    }
    let ln_f_gamma = take("ln_f.weight", vec![d])?;
    let ln_f_beta = take("ln_f.bias", vec![d])?;
    let ignored = tensors.into_keys().collect();
    Ok(LoadedModel {
        model: Gpt2Model {
            config,
            wte,
            wpe,
            blocks,
            ln_f_gamma,
            ln_f_beta,
        },
        ignored,
    })
}
