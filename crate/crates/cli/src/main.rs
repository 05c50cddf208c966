use std::io::Write;
use std::ops::ControlFlow;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use glassgpt_cli::document::trace_prompt;
use glassgpt_cli::server::{self, AppState};
use glassgpt_cli::source::{load_vocab, ModelLocation, SourceError};
use glassgpt_core::engine::{Engine, EngineError};
use glassgpt_core::{BpeVocab, CaptureLevel, SamplingParams, TraceCaptureSpec};
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(name = "glassgpt", version, about = "Run GPT-2 small and look inside")]
struct Cli {
    /// Checkpoint file, or a directory holding model.safetensors
    /// [default: $GLASSGPT_MODEL_DIR]
    #[arg(long, global = true, value_name = "PATH")]
    model: Option<PathBuf>,
    /// vocab.json [default: bundled GPT-2 vocabulary]
    #[arg(long, global = true, value_name = "PATH")]
    vocab: Option<PathBuf>,
    /// merges.txt [default: bundled GPT-2 merges]
    #[arg(long, global = true, value_name = "PATH")]
    merges: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Sampling {
    /// 0 is greedy
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    temperature: f32,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Sampling {
    fn params(&self) -> Result<SamplingParams, CliError> {
        let params = SamplingParams {
            temperature: self.temperature,
            top_k: self.top_k,
            seed: self.seed,
        };
        params.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(params)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print token ids and display tokens
    Encode { text: String },
    /// Rank the next token
    Forward {
        prompt: String,
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long, default_value = "none")]
        capture: CaptureLevel,
    },
    /// Sample tokens, printing them as they arrive
    Generate {
        prompt: String,
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long, default_value_t = 20)]
        max_new_tokens: usize,
    },
    /// Write a JSON trace document
    Trace {
        prompt: String,
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long, default_value = "full")]
        capture: CaptureLevel,
        /// Capture only this layer in full
        #[arg(long)]
        layer: Option<usize>,
        /// Capture only this head in full
        #[arg(long)]
        head: Option<usize>,
        /// Output file [default: stdout]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP API on loopback
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Load(#[from] SourceError),
    #[error(transparent)]
    Inference(#[from] EngineError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Load(_) => 2,
            Self::Inference(_) | Self::Io(_) => 3,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("glassgpt: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

struct Sources {
    model: Option<PathBuf>,
    vocab: Option<PathBuf>,
    merges: Option<PathBuf>,
}

impl Sources {
    fn vocab(&self) -> Result<BpeVocab, CliError> {
        Ok(load_vocab(self.vocab.as_deref(), self.merges.as_deref())?)
    }

    fn location(&self) -> Result<ModelLocation, CliError> {
        Ok(ModelLocation::resolve(self.model.as_deref())?)
    }

    fn engine(&self) -> Result<Engine, CliError> {
        let location = self.location()?;
        Ok(location.load(self.vocab()?)?)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let sources = Sources {
        model: cli.model,
        vocab: cli.vocab,
        merges: cli.merges,
    };
    let stdout = std::io::stdout();
    match cli.command {
        Command::Encode { text } => {
            let vocab = sources.vocab()?;
            let spans = vocab
                .spans(&vocab.encode(&text))
                .map_err(|e| CliError::Inference(e.into()))?;
            let ids: Vec<_> = spans.iter().map(|s| s.id).collect();
            let displays: Vec<_> = spans.iter().map(|s| s.display.as_str()).collect();
            let mut out = stdout.lock();
            writeln!(out, "{}", serde_json::to_string(&ids).expect("ids serialize"))?;
            writeln!(out, "{}", serde_json::to_string(&displays).expect("strings serialize"))?;
        }
        Command::Forward {
            prompt,
            sampling,
            capture,
        } => {
            let params = sampling.params()?;
            let engine = sources.engine()?;
            let spec = TraceCaptureSpec {
                level: capture,
                ..TraceCaptureSpec::summary()
            };
            let doc = trace_prompt(&engine, &prompt, &spec, &params)?;
            let mut out = stdout.lock();
            writeln!(out, "{} prompt tokens, forward pass {:.1} ms", doc.tokens.len(), doc.timing.forward_ms)?;
            writeln!(out, "{:>4}  {:>8}  {:<20}  {:>10}  {:>11}", "rank", "token_id", "token", "logit", "probability")?;
            for (rank, e) in doc.predictions.entries.iter().enumerate() {
                writeln!(
                    out,
                    "{:>4}  {:>8}  {:<20}  {:>10.4}  {:>11.6}",
                    rank + 1,
                    e.token_id,
                    e.display,
                    e.logit,
                    e.probability
                )?;
            }
            writeln!(out, "entropy {:.4} nats", doc.predictions.entropy)?;
        }
        Command::Generate {
            prompt,
            sampling,
            max_new_tokens,
        } => {
            let params = sampling.params()?;
            if max_new_tokens == 0 {
                return Err(CliError::Usage("--max-new-tokens must be at least 1".into()));
            }
            let engine = sources.engine()?;
            let mut out = stdout.lock();
            write!(out, "{prompt}")?;
            out.flush()?;
            // Bytes of a character split across tokens wait for the rest.
            let mut pending = Vec::new();
            let mut io_error = None;
            engine.generate(&prompt, max_new_tokens, &params, |step| {
                pending.extend_from_slice(engine.vocab.token_bytes(step.token_id).unwrap_or_default());
                let valid = match std::str::from_utf8(&pending) {
                    Ok(s) => s.len(),
                    Err(e) if e.error_len().is_none() => e.valid_up_to(),
                    Err(_) => pending.len(),
                };
                let text = String::from_utf8_lossy(&pending[..valid]).into_owned();
                pending.drain(..valid);
                if let Err(e) = write!(out, "{text}").and_then(|_| out.flush()) {
                    io_error = Some(e);
                    return ControlFlow::Break(());
                }
                ControlFlow::Continue(())
            })?;
            if let Some(e) = io_error {
                return Err(e.into());
            }
            writeln!(out, "{}", String::from_utf8_lossy(&pending))?;
        }
        Command::Trace {
            prompt,
            sampling,
            capture,
            layer,
            head,
            out,
        } => {
            let params = sampling.params()?;
            let engine = sources.engine()?;
            let cfg = engine.config();
            if layer.is_some_and(|l| l >= cfg.n_layer) || head.is_some_and(|h| h >= cfg.n_head) {
                return Err(CliError::Usage(format!(
                    "--layer must be below {} and --head below {}",
                    cfg.n_layer, cfg.n_head
                )));
            }
            let base = match capture {
                CaptureLevel::None => TraceCaptureSpec::none(),
                CaptureLevel::Summary => TraceCaptureSpec::summary(),
                CaptureLevel::Full => TraceCaptureSpec::full(),
            };
            let spec = TraceCaptureSpec {
                layers: layer.map(|l| vec![l]),
                heads: head.map(|h| vec![h]),
                ..base
            };
            let doc = trace_prompt(&engine, &prompt, &spec, &params)?;
            let json = serde_json::to_vec(&doc).map_err(std::io::Error::other)?;
            match out {
                Some(path) => std::fs::write(&path, json)?,
                None => {
                    let mut out = stdout.lock();
                    out.write_all(&json)?;
                    writeln!(out)?;
                }
            }
        }
        Command::Serve { port } => {
            let location = sources.location()?;
            let vocab = sources.vocab()?;
            let state = AppState::pending();
            let loader = state.clone();
            // Load in the background; the API answers 503 until it is done.
            std::thread::spawn(move || match location.load(vocab) {
                Ok(engine) => {
                    log::info!("model loaded from {}", location.checkpoint.display());
                    loader.set_engine(engine);
                }
                Err(e) => {
                    eprintln!("glassgpt: {e}");
                    loader.set_load_error(e.to_string());
                }
            });
            tokio::runtime::Runtime::new()?.block_on(server::serve(state, port))?;
        }
    }
    Ok(())
}
