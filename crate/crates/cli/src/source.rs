//! Locating the checkpoint, its config, and the vocabulary.

use std::fs::File;
use std::path::{Path, PathBuf};

use glassgpt_core::engine::{Engine, EngineError};
use glassgpt_core::{BpeVocab, LoadError, ModelConfig, TokenizerError};
use thiserror::Error;

pub const MODEL_DIR_ENV: &str = "GLASSGPT_MODEL_DIR";
pub const CHECKPOINT_FILE: &str = "model.safetensors";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("no model given: pass --model or set {MODEL_DIR_ENV}")]
    NoModel,
    #[error("{0}: no such file or directory")]
    NotFound(PathBuf),
    #[error("--vocab and --merges must be given together")]
    PartialVocab,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Config { path: PathBuf, source: LoadError },
    #[error("vocabulary: {0}")]
    Vocab(#[from] TokenizerError),
    #[error("{path}: {source}")]
    Engine { path: PathBuf, source: EngineError },
}

/// Checkpoint file plus config, resolved from a file or directory path.
#[derive(Debug, Clone)]
pub struct ModelLocation {
    pub checkpoint: PathBuf,
    pub config: ModelConfig,
}

impl ModelLocation {
    /// `path` may be the checkpoint itself or a directory holding
    /// `model.safetensors`. A `config.json` next to the checkpoint overrides
    /// the GPT-2 small defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self, SourceError> {
        let path = match path {
            Some(p) => p.to_path_buf(),
            None => std::env::var_os(MODEL_DIR_ENV)
                .map(PathBuf::from)
                .ok_or(SourceError::NoModel)?,
        };
        let checkpoint = if path.is_dir() {
            path.join(CHECKPOINT_FILE)
        } else {
            path
        };
        if !checkpoint.is_file() {
            return Err(SourceError::NotFound(checkpoint));
        }
        let config_path = checkpoint.with_file_name(CONFIG_FILE);
        let config = if config_path.is_file() {
            let text = std::fs::read_to_string(&config_path).map_err(|source| SourceError::Io {
                path: config_path.clone(),
                source,
            })?;
            ModelConfig::from_hf_json(&text).map_err(|source| SourceError::Config {
                path: config_path,
                source,
            })?
        } else {
            ModelConfig::GPT2_SMALL
        };
        Ok(Self { checkpoint, config })
    }

    pub fn load(&self, vocab: BpeVocab) -> Result<Engine, SourceError> {
        Engine::load(vocab, &self.checkpoint, self.config).map_err(|source| SourceError::Engine {
            path: self.checkpoint.clone(),
            source,
        })
    }
}

/// The bundled GPT-2 vocabulary unless both files are given.
pub fn load_vocab(vocab: Option<&Path>, merges: Option<&Path>) -> Result<BpeVocab, SourceError> {
    let open = |p: &Path| {
        File::open(p).map_err(|source| SourceError::Io {
            path: p.to_path_buf(),
            source,
        })
    };
    match (vocab, merges) {
        (None, None) => Ok(BpeVocab::gpt2()),
        (Some(v), Some(m)) => Ok(BpeVocab::load(
            std::io::BufReader::new(open(v)?),
            std::io::BufReader::new(open(m)?),
        )?),
        _ => Err(SourceError::PartialVocab),
    }
}
