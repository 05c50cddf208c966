#![allow(dead_code)]

use std::path::{Path, PathBuf};

use glassgpt_core::weights::{load_model, read_checkpoint_file, synthetic::synthetic_tensors};
use glassgpt_core::{BpeVocab, Gpt2Model, ModelConfig, TokenId};
use serde::Deserialize;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

#[derive(Debug, Deserialize)]
pub struct PromptFixture {
    pub prompt: String,
    pub ids: Vec<TokenId>,
    pub top10: Vec<TokenId>,
    pub min_top10_gap: f64,
    pub logits_file: String,
}

#[derive(Debug, Deserialize)]
pub struct GreedyFixture {
    pub prompt: String,
    pub ids: Vec<TokenId>,
    pub generated: Vec<TokenId>,
}

#[derive(Debug, Deserialize)]
pub struct HiddenFixture {
    pub prompt: String,
    pub ids: Vec<TokenId>,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Deserialize)]
pub struct Parity {
    pub prompts: Vec<PromptFixture>,
    pub greedy: Vec<GreedyFixture>,
    pub hidden: HiddenFixture,
}

#[derive(Debug, Deserialize)]
pub struct CorpusRecord {
    pub text: String,
    pub ids: Vec<TokenId>,
}

pub fn read_f32(path: impl AsRef<Path>) -> Vec<f32> {
    let bytes = std::fs::read(path.as_ref())
        .unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()));
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Reference outputs plus the weights they were computed from.
pub struct FixtureSet {
    pub name: &'static str,
    pub dir: PathBuf,
    pub parity: Parity,
}

impl FixtureSet {
    pub fn load(name: &'static str) -> Self {
        let dir = fixtures().join(name);
        let text = std::fs::read_to_string(dir.join("parity.json")).expect("parity.json");
        Self {
            name,
            parity: serde_json::from_str(&text).expect("parity.json schema"),
            dir,
        }
    }

    pub fn logits(&self, p: &PromptFixture) -> Vec<f32> {
        read_f32(self.dir.join(&p.logits_file))
    }
}

/// Directory of a real checkpoint, when one is configured and matching
/// fixtures have been generated for it.
pub fn real_checkpoint() -> Option<PathBuf> {
    let dir = PathBuf::from(std::env::var_os("GLASSGPT_MODEL_DIR")?);
    let file = dir.join("model.safetensors");
    (file.is_file() && fixtures().join("real/parity.json").is_file()).then_some(file)
}

pub fn load_real(file: &Path) -> Gpt2Model {
    let (_, tensors) = read_checkpoint_file(file).expect("real checkpoint");
    load_model(tensors).expect("real checkpoint loads").model
}

pub fn synthetic_model() -> Gpt2Model {
    load_model(synthetic_tensors(&ModelConfig::GPT2_SMALL, 0))
        .expect("synthetic checkpoint loads")
        .model
}

pub fn vocab() -> BpeVocab {
    BpeVocab::gpt2()
}

pub fn corpus() -> Vec<CorpusRecord> {
    let text = std::fs::read_to_string(fixtures().join("tokenizer_corpus.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// Index order by descending value, ties to the lowest index.
pub fn ranking(values: &[f32], k: usize) -> Vec<TokenId> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.into_iter().take(k).map(|i| i as TokenId).collect()
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}
