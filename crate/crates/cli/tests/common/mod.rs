#![allow(dead_code)]

use std::path::{Path, PathBuf};

use glassgpt_core::engine::Engine;
use glassgpt_core::weights::{load_model_with_config, synthetic::synthetic_tensors, write_checkpoint};
use glassgpt_core::{BpeVocab, ModelConfig};

/// Small enough to run in milliseconds, with the real vocabulary.
pub fn tiny_config() -> ModelConfig {
    ModelConfig::new(2, 2, 16, 32, 50257, 64).unwrap()
}

pub fn engine(cfg: ModelConfig) -> Engine {
    let model = load_model_with_config(synthetic_tensors(&cfg, 5), cfg).unwrap().model;
    Engine::new(BpeVocab::gpt2(), model).unwrap()
}

pub fn hf_config_json(cfg: &ModelConfig) -> String {
    serde_json::json!({
        "model_type": "gpt2",
        "n_layer": cfg.n_layer,
        "n_head": cfg.n_head,
        "n_embd": cfg.d_model,
        "n_inner": cfg.d_mlp,
        "n_positions": cfg.max_context,
        "vocab_size": cfg.vocab_size,
        "layer_norm_epsilon": cfg.ln_eps,
    })
    .to_string()
}

/// Write `model.safetensors` (and `config.json` unless it is GPT-2 small)
/// into `dir`.
pub fn write_model_dir(dir: &Path, cfg: &ModelConfig, seed: u64) -> PathBuf {
    let tensors = synthetic_tensors(cfg, seed);
    let path = dir.join("model.safetensors");
    let file = std::io::BufWriter::new(std::fs::File::create(&path).unwrap());
    write_checkpoint(tensors.iter().map(|(k, v)| (k.as_str(), v)), file).unwrap();
    if *cfg != ModelConfig::GPT2_SMALL {
        std::fs::write(dir.join("config.json"), hf_config_json(cfg)).unwrap();
    }
    path
}

pub fn core_fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/synthetic")
}

#[derive(serde::Deserialize)]
pub struct Greedy {
    pub prompt: String,
    pub generated: Vec<u32>,
}

pub fn greedy_fixtures() -> Vec<Greedy> {
    #[derive(serde::Deserialize)]
    struct Parity {
        greedy: Vec<Greedy>,
    }
    let text = std::fs::read_to_string(core_fixtures().join("parity.json")).unwrap();
    serde_json::from_str::<Parity>(&text).unwrap().greedy
}
