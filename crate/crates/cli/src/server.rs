//! Local HTTP/JSON service.
//!
//! - `POST /api/forward`: one forward pass, answered with a [`TraceDocument`].
//! - `POST /api/generate`: newline-delimited JSON, one event per token, then
//!   `{"done":true,…}`.
//! - `GET /api/model`: config, parameter count and checkpoint hash.
//!
//! The model is shared read-only; every request owns its buffers. Requests
//! arriving before the model has loaded get 503.

use std::convert::Infallible;
use std::ops::ControlFlow;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use axum::body::{Body, Bytes};
use axum::extract::{Request, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use glassgpt_core::engine::{Engine, EngineError};
use glassgpt_core::model::ModelError;
use glassgpt_core::sampler::{SamplerError, MAX_UI_TEMPERATURE};
use glassgpt_core::{CaptureLevel, SamplingParams, TraceCaptureSpec};
use serde_json::{json, Map, Value};

use crate::document::{trace_prompt, TRACE_VERSION};

/// Events buffered per generation stream before the producer blocks.
const STREAM_BUFFER: usize = 4;

/// Generation lifecycle counters.
#[derive(Debug, Default)]
pub struct Stats {
    pub active_generations: AtomicUsize,
    pub completed_generations: AtomicUsize,
    pub aborted_generations: AtomicUsize,
}

#[derive(Debug, Default)]
pub struct AppState {
    engine: OnceLock<Arc<Engine>>,
    load_error: Mutex<Option<String>>,
    pub stats: Stats,
    error_ids: AtomicU64,
}

impl AppState {
    /// A service whose model is still loading.
    pub fn pending() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn with_engine(engine: Engine) -> Arc<Self> {
        let state = Self::pending();
        state.set_engine(engine);
        state
    }

    pub fn set_engine(&self, engine: Engine) {
        let _ = self.engine.set(Arc::new(engine));
    }

    pub fn set_load_error(&self, message: String) {
        *self.load_error.lock().expect("not poisoned") = Some(message);
    }

    fn engine(&self) -> Result<Arc<Engine>, ApiError> {
        if let Some(e) = self.engine.get() {
            return Ok(e.clone());
        }
        let message = match &*self.load_error.lock().expect("not poisoned") {
            Some(err) => format!("model failed to load: {err}"),
            None => "model is still loading".to_string(),
        };
        Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, message, None))
    }

    /// Log an internal failure and return an opaque reference to it.
    fn internal(&self, err: impl std::fmt::Display) -> ApiError {
        let n = self.error_ids.fetch_add(1, Ordering::Relaxed);
        let id = format!("E{:x}-{n}", std::process::id());
        log::error!("[{id}] {err}");
        ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            error: "internal error".into(),
            field: None,
            id: Some(id),
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    error: String,
    field: Option<&'static str>,
    id: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>, field: Option<&'static str>) -> Self {
        Self {
            status,
            error: error.into(),
            field,
            id: None,
        }
    }

    fn bad(field: &'static str, error: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, error, Some(field))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = match self.id {
            Some(id) => json!({ "error": self.error, "id": id }),
            None => json!({ "error": self.error, "field": self.field }),
        };
        (self.status, Json(body)).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/forward", post(forward_handler))
        .route("/api/generate", post(generate_handler))
        .route("/api/model", get(model_handler))
        .layer(middleware::from_fn(cors))
        .with_state(state)
}

/// Bind on loopback and serve until the process exits.
pub async fn serve(state: Arc<AppState>, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

fn is_loopback_origin(origin: &str) -> bool {
    let Some(rest) = origin
        .strip_prefix("http://")
        .or_else(|| origin.strip_prefix("https://"))
    else {
        return false;
    };
    let host = match rest.strip_prefix('[') {
        Some(v6) => v6.split(']').next().unwrap_or(""),
        None => rest.split(':').next().unwrap_or(""),
    };
    matches!(host, "localhost" | "127.0.0.1" | "::1")
}

/// Allow browser pages served from loopback origins.
async fn cors(req: Request, next: Next) -> Response {
    let origin = req
        .headers()
        .get(header::ORIGIN)
        .filter(|o| o.to_str().is_ok_and(is_loopback_origin))
        .cloned();
    let mut response = if req.method() == Method::OPTIONS {
        StatusCode::NO_CONTENT.into_response()
    } else {
        next.run(req).await
    };
    if let Some(origin) = origin {
        let h = response.headers_mut();
        h.insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, origin);
        h.insert(header::VARY, HeaderValue::from_static("Origin"));
        h.insert(
            header::ACCESS_CONTROL_ALLOW_METHODS,
            HeaderValue::from_static("GET, POST, OPTIONS"),
        );
        h.insert(
            header::ACCESS_CONTROL_ALLOW_HEADERS,
            HeaderValue::from_static("content-type"),
        );
    }
    response
}

/// A JSON object body; anything else is a 400 or 415.
fn json_object(headers: &HeaderMap, body: &[u8]) -> Result<Map<String, Value>, ApiError> {
    let is_json = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.split(';').next())
        .is_some_and(|v| v.trim().eq_ignore_ascii_case("application/json"));
    if !is_json {
        return Err(ApiError::new(
            StatusCode::UNSUPPORTED_MEDIA_TYPE,
            "content-type must be application/json",
            None,
        ));
    }
    match serde_json::from_slice(body) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(ApiError::new(StatusCode::BAD_REQUEST, "body must be a JSON object", None)),
        Err(e) => Err(ApiError::new(StatusCode::BAD_REQUEST, format!("malformed JSON: {e}"), None)),
    }
}

/// Typed, field-attributed access to a request object.
struct Fields(Map<String, Value>);

impl Fields {
    fn reject_unknown(&self, known: &[&str]) -> Result<(), ApiError> {
        match self.0.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                format!("unknown field {k:?}"),
                None,
            )),
            None => Ok(()),
        }
    }

    fn get(&self, field: &str) -> Option<&Value> {
        self.0.get(field).filter(|v| !v.is_null())
    }

    fn prompt(&self) -> Result<String, ApiError> {
        match self.get("prompt") {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(ApiError::bad("prompt", "prompt must be a string")),
            None => Err(ApiError::bad("prompt", "prompt is required")),
        }
    }

    fn temperature(&self) -> Result<f32, ApiError> {
        let Some(v) = self.get("temperature") else {
            return Ok(1.0);
        };
        let t = v
            .as_f64()
            .ok_or_else(|| ApiError::bad("temperature", "temperature must be a number"))?;
        if !(0.0..=f64::from(MAX_UI_TEMPERATURE)).contains(&t) {
            return Err(ApiError::bad(
                "temperature",
                format!("temperature must be in [0, {MAX_UI_TEMPERATURE}], got {t}"),
            ));
        }
        Ok(t as f32)
    }

    fn count(&self, field: &'static str, min: u64) -> Result<Option<u64>, ApiError> {
        let Some(v) = self.get(field) else {
            return Ok(None);
        };
        match v.as_u64() {
            Some(n) if n >= min => Ok(Some(n)),
            _ => Err(ApiError::bad(
                field,
                format!("{field} must be an integer >= {min}"),
            )),
        }
    }

    fn index(&self, field: &'static str, bound: usize) -> Result<Option<usize>, ApiError> {
        match self.count(field, 0)? {
            Some(i) if i as usize >= bound => Err(ApiError::bad(
                field,
                format!("{field} must be below {bound}"),
            )),
            other => Ok(other.map(|i| i as usize)),
        }
    }

    fn capture(&self) -> Result<CaptureLevel, ApiError> {
        match self.get("capture") {
            None => Ok(CaptureLevel::Summary),
            Some(Value::String(s)) => s.parse().map_err(|e: String| ApiError::bad("capture", e)),
            Some(_) => Err(ApiError::bad("capture", "capture must be a string")),
        }
    }
}

/// Map engine failures: oversized prompts are 413, bad input 400, the rest 500.
fn engine_error(state: &AppState, err: EngineError) -> ApiError {
    match err {
        EngineError::Model(ModelError::ContextOverflow { len, limit }) => ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("prompt is {len} tokens; the context holds {limit}"),
            Some("prompt"),
        ),
        EngineError::Sampler(SamplerError::ContextOverflow {
            prompt_len,
            max_new_tokens,
            limit,
            ..
        }) => ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("{prompt_len} prompt tokens + {max_new_tokens} new tokens exceed the {limit}-token context"),
            Some("max_new_tokens"),
        ),
        EngineError::Model(ModelError::EmptySequence)
        | EngineError::Sampler(SamplerError::EmptyPrompt) => {
            ApiError::bad("prompt", "prompt produces no tokens")
        }
        EngineError::Sampler(SamplerError::NoNewTokens) => {
            ApiError::bad("max_new_tokens", "max_new_tokens must be at least 1")
        }
        other => state.internal(other),
    }
}

async fn forward_handler(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    let fields = Fields(json_object(&headers, &body)?);
    fields.reject_unknown(&["prompt", "temperature", "top_k", "capture", "capture_layer", "capture_head"])?;
    let engine = state.engine()?;
    let cfg = *engine.config();
    let prompt = fields.prompt()?;
    let params = SamplingParams {
        temperature: fields.temperature()?,
        top_k: fields.count("top_k", 1)?.map(|k| k as usize),
        seed: 0,
    };
    let level = fields.capture()?;
    let layer = fields.index("capture_layer", cfg.n_layer)?;
    let head = fields.index("capture_head", cfg.n_head)?;
    // Full traces are limited to one layer/head, (0, 0) unless chosen.
    let capture = match level {
        CaptureLevel::Full => TraceCaptureSpec::full_head(layer.unwrap_or(0), head.unwrap_or(0)),
        _ => TraceCaptureSpec {
            level,
            layers: layer.map(|l| vec![l]),
            heads: head.map(|h| vec![h]),
            ..TraceCaptureSpec::summary()
        },
    };

    let worker = state.clone();
    let doc = tokio::task::spawn_blocking(move || {
        trace_prompt(&engine, &prompt, &capture, &params)
            .map_err(|e| engine_error(&worker, e))
            .and_then(|doc| serde_json::to_vec(&doc).map_err(|e| worker.internal(e)))
    })
    .await
    .map_err(|e| state.internal(e))??;
    Ok(([(header::CONTENT_TYPE, "application/json")], doc).into_response())
}

/// Decrements the active count however a generation ends.
struct ActiveGuard<'a>(&'a Stats);

impl Drop for ActiveGuard<'_> {
    fn drop(&mut self) {
        self.0.active_generations.fetch_sub(1, Ordering::SeqCst);
    }
}

fn line(value: &Value) -> Bytes {
    let mut out = serde_json::to_vec(value).expect("JSON values serialize");
    out.push(b'\n');
    Bytes::from(out)
}

async fn generate_handler(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    let fields = Fields(json_object(&headers, &body)?);
    fields.reject_unknown(&["prompt", "max_new_tokens", "temperature", "top_k", "seed"])?;
    let engine = state.engine()?;
    let prompt = fields.prompt()?;
    let max_new_tokens = fields
        .count("max_new_tokens", 1)?
        .ok_or_else(|| ApiError::bad("max_new_tokens", "max_new_tokens is required"))?
        as usize;
    let params = SamplingParams {
        temperature: fields.temperature()?,
        top_k: fields.count("top_k", 1)?.map(|k| k as usize),
        seed: fields.count("seed", 0)?.unwrap_or(0),
    };
    // Reject bad requests before any bytes are streamed.
    let prompt_len = engine.vocab.encode(&prompt).len();
    glassgpt_core::sampler::check_generation(prompt_len, max_new_tokens, engine.config().max_context)
        .map_err(|e| engine_error(&state, e.into()))?;

    let (tx, mut rx) = tokio::sync::mpsc::channel::<Bytes>(STREAM_BUFFER);
    let worker = state.clone();
    state.stats.active_generations.fetch_add(1, Ordering::SeqCst);
    tokio::task::spawn_blocking(move || {
        let stats = &worker.stats;
        let _active = ActiveGuard(stats);
        let mut disconnected = false;
        let result = engine.generate(&prompt, max_new_tokens, &params, |step| {
            let event = json!({
                "display": engine.display(step.token_id),
                "step": step.step,
                "token_id": step.token_id,
                "top10": step.prediction.entries,
            });
            if tx.blocking_send(line(&event)).is_err() {
                disconnected = true;
                return ControlFlow::Break(());
            }
            ControlFlow::Continue(())
        });
        if disconnected {
            stats.aborted_generations.fetch_add(1, Ordering::SeqCst);
            return;
        }
        let last = match result {
            Ok(g) => json!({
                "done": true,
                "stopped_at_end_of_text": g.stopped_at_end_of_text,
                "text": engine.vocab.decode(&g.tokens).unwrap_or_default(),
                "token_ids": g.tokens,
            }),
            Err(e) => {
                let err = worker.internal(e);
                json!({ "done": true, "error": err.error, "id": err.id })
            }
        };
        if tx.blocking_send(line(&last)).is_err() {
            stats.aborted_generations.fetch_add(1, Ordering::SeqCst);
        } else {
            stats.completed_generations.fetch_add(1, Ordering::SeqCst);
        }
    });

    let stream = futures::stream::poll_fn(move |cx| rx.poll_recv(cx).map(|o| o.map(Ok::<_, Infallible>)));
    Ok((
        [(header::CONTENT_TYPE, "application/x-ndjson")],
        Body::from_stream(stream),
    )
        .into_response())
}

async fn model_handler(State(state): State<Arc<AppState>>) -> Result<Json<Value>, ApiError> {
    let engine = state.engine()?;
    Ok(Json(json!({
        "checkpoint_hash": engine.source.sha256,
        "config": engine.config(),
        "parameter_count": engine.model.parameter_count(),
        "trace_version": TRACE_VERSION,
    })))
}
