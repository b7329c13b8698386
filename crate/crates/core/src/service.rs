//! HTTP service: streaming guided generation, task-set scoring and the model
//! registry.
//!
//! * `POST /v1/generate` streams newline-delimited JSON [`StreamEvent`]s.
//! * `POST /v1/score` returns a [`ScoreReport`](crate::scoring::ScoreReport).
//! * `GET /v1/models` lists the registry; `GET /health` answers `ok`.
//!
//! Sessions are stateless: the same request with the same seed yields the
//! same stream.

use std::convert::Infallible;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, Semaphore};
use tower_http::cors::CorsLayer;

use crate::error::Error;
use crate::guidance::{
    Decoder, GenerateOptions, GuidanceConfig, SamplerConfig, StopReason, Strategy,
    DEFAULT_NEGATIVE_PROMPT,
};
use crate::registry::{ModelListing, Registry};
use crate::scoring::{evaluate_taskset, parse_tasks};
use crate::vocab::{encode, TokenId, Utf8Stream};

pub const MAX_GENERATE_TOKENS: usize = 4096;
pub const DEFAULT_BODY_LIMIT: usize = 8 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
}

fn default_max_tokens() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    #[serde(default)]
    pub model: Option<String>,
    pub system_prompt: String,
    #[serde(default)]
    pub negative_system_prompt: Option<String>,
    pub messages: Vec<Message>,
    pub gamma: f64,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub top_k: Option<usize>,
    #[serde(default)]
    pub top_p: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default)]
    pub stop: Vec<String>,
}

/// Chat template: a SYSTEM block, alternating USER/ASSISTANT turns, and an
/// open ASSISTANT turn.
pub fn render_chat(system: &str, messages: &[Message]) -> String {
    let mut out = format!("SYSTEM:\n{system}\n\n");
    for m in messages {
        let tag = match m.role {
            Role::User => "USER",
            Role::Assistant => "ASSISTANT",
        };
        out.push_str(&format!("{tag}:\n{}\n\n", m.text));
    }
    out.push_str("ASSISTANT:\n");
    out
}

impl GenerateRequest {
    pub fn strategy(&self) -> Result<Strategy, String> {
        let t = self.temperature.unwrap_or(1.0);
        Ok(match (self.temperature, self.top_k, self.top_p) {
            (_, Some(_), Some(_)) => return Err("top_k and top_p are mutually exclusive".into()),
            (_, Some(k), None) => Strategy::TopK { k, temperature: t },
            (_, None, Some(p)) => Strategy::TopP { p, temperature: t },
            (Some(temperature), None, None) => Strategy::Temperature { temperature },
            (None, None, None) => Strategy::Greedy,
        })
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.messages.is_empty() {
            return Err("messages must not be empty".into());
        }
        for (i, m) in self.messages.iter().enumerate() {
            let want = if i % 2 == 0 {
                Role::User
            } else {
                Role::Assistant
            };
            if m.role != want {
                return Err(format!("message {i} should be from {want:?}"));
            }
        }
        if self.messages.last().map(|m| m.role) != Some(Role::User) {
            return Err("the last message must be from the user".into());
        }
        if self.max_tokens == 0 || self.max_tokens > MAX_GENERATE_TOKENS {
            return Err(format!("max_tokens must be in 1..={MAX_GENERATE_TOKENS}"));
        }
        self.guidance()
            .and_then(|c| c.validate().map_err(|e| e.to_string()))
    }

    /// Conditional prompt tokens.
    pub fn prompt(&self) -> Vec<TokenId> {
        encode(render_chat(&self.system_prompt, &self.messages))
    }

    /// With a negative system prompt, the unconditional context is the full
    /// chat rendered with it. Both renderings end in the same byte, which the
    /// negative-prompt mode appends from the conditional prompt, so it is
    /// trimmed here.
    pub fn guidance(&self) -> Result<GuidanceConfig, String> {
        let sampler = SamplerConfig {
            strategy: self.strategy()?,
            seed: self.seed,
        };
        let mut config = GuidanceConfig::new(self.gamma).with_sampler(sampler);
        if let Some(neg) = &self.negative_system_prompt {
            let mut negative = encode(render_chat(neg, &self.messages));
            negative.pop();
            config = config.with_negative_prompt(negative);
        }
        Ok(config)
    }

    pub fn options(&self) -> GenerateOptions {
        GenerateOptions {
            max_tokens: self.max_tokens,
            stop: self
                .stop
                .iter()
                .filter(|s| !s.is_empty())
                .map(encode)
                .collect(),
            record_distributions: false,
        }
    }
}

/// One NDJSON line of a generation stream. The final event has `done` set
/// and carries the stop reason, or an error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEvent {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guided_logprob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy_cond: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy_uncond: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy_guided: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap_cond: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap_uncond: Option<usize>,
    pub done: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_reason: Option<StopReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl StreamEvent {
    fn done(text: String, stop_reason: Option<StopReason>, error: Option<String>) -> Self {
        Self {
            text,
            token: None,
            guided_logprob: None,
            entropy_cond: None,
            entropy_uncond: None,
            entropy_guided: None,
            overlap_cond: None,
            overlap_uncond: None,
            done: true,
            stop_reason,
            error,
        }
    }
}

fn default_gamma() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub negative_prompt: Option<String>,
    #[serde(default)]
    pub split: Option<usize>,
    /// Newline-delimited task records.
    pub tasks: String,
}

impl ScoreRequest {
    pub fn guidance(&self) -> Result<GuidanceConfig, String> {
        let config = match (&self.negative_prompt, self.split) {
            (Some(_), Some(_)) => {
                return Err("negative_prompt and split are mutually exclusive".into())
            }
            (Some(neg), None) => GuidanceConfig::new(self.gamma).with_negative_prompt(encode(neg)),
            (None, Some(i)) => GuidanceConfig::new(self.gamma).with_split(i),
            (None, None) => GuidanceConfig::new(self.gamma),
        };
        config.validate().map_err(|e| e.to_string())?;
        Ok(config)
    }
}

/// Shared state: the registry and a cap on concurrently running sessions.
#[derive(Clone)]
pub struct AppState {
    pub registry: Arc<Registry>,
    pub limiter: Arc<Semaphore>,
}

impl AppState {
    pub fn new(registry: Registry, max_concurrency: usize) -> Self {
        Self {
            registry: Arc::new(registry),
            limiter: Arc::new(Semaphore::new(max_concurrency.max(1))),
        }
    }
}

pub fn router(state: AppState) -> Router {
    router_with_limit(state, DEFAULT_BODY_LIMIT)
}

pub fn router_with_limit(state: AppState, body_limit: usize) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/v1/models", get(handle_models))
        .route("/v1/generate", post(handle_generate))
        .route("/v1/score", post(handle_score))
        .layer(DefaultBodyLimit::max(body_limit))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

fn error_response(status: StatusCode, message: impl Into<String>) -> Response {
    (
        status,
        Json(ErrorBody {
            error: message.into(),
        }),
    )
        .into_response()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelsResponse {
    pub models: Vec<ModelListing>,
    pub default_negative_prompt: String,
}

async fn handle_models(State(state): State<AppState>) -> Json<ModelsResponse> {
    Json(ModelsResponse {
        models: state.registry.listing(),
        default_negative_prompt: DEFAULT_NEGATIVE_PROMPT.to_string(),
    })
}

fn ndjson_line(event: &StreamEvent) -> Bytes {
    let mut line = serde_json::to_vec(event).expect("stream events serialize");
    line.push(b'\n');
    Bytes::from(line)
}

async fn handle_generate(State(state): State<AppState>, body: Bytes) -> Response {
    let req: GenerateRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, format!("invalid request: {e}")),
    };
    if let Err(e) = req.validate() {
        return error_response(StatusCode::BAD_REQUEST, e);
    }
    let Some(model) = state.registry.get(req.model.as_deref()) else {
        return error_response(StatusCode::BAD_REQUEST, "unknown model");
    };
    let config = match req.guidance() {
        Ok(c) => c,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, e),
    };
    let prompt = req.prompt();
    let options = req.options();
    let permit = state
        .limiter
        .clone()
        .acquire_owned()
        .await
        .expect("semaphore never closes");

    let (tx, mut rx) = mpsc::channel::<Result<StreamEvent, Error>>(64);
    tokio::task::spawn_blocking(move || {
        let _permit = permit;
        let mut decoder = match Decoder::new(model.as_ref(), &prompt, &config, options) {
            Ok(d) => d,
            Err(e) => {
                let _ = tx.blocking_send(Err(e));
                return;
            }
        };
        let mut text = Utf8Stream::new();
        while let Some(step) = decoder.next_step() {
            let event = step.map(|r| StreamEvent {
                text: text.push(r.token),
                token: Some(r.token),
                guided_logprob: Some(r.guided_logprob),
                entropy_cond: Some(r.entropy_cond),
                entropy_uncond: Some(r.entropy_uncond),
                entropy_guided: Some(r.entropy_guided),
                overlap_cond: Some(r.overlap_cond),
                overlap_uncond: Some(r.overlap_uncond),
                done: false,
                stop_reason: None,
                error: None,
            });
            let failed = event.is_err();
            if tx.blocking_send(event).is_err() || failed {
                return;
            }
        }
        let _ = tx.blocking_send(Ok(StreamEvent::done(
            text.finish(),
            decoder.stop_reason(),
            None,
        )));
    });

    // A failure before the first token is reported as a plain 502.
    let first = match rx.recv().await {
        Some(Ok(event)) => event,
        Some(Err(
            e @ (Error::InvalidConfig(_) | Error::TokenOutOfRange { .. } | Error::EmptyPrompt),
        )) => return error_response(StatusCode::BAD_REQUEST, e.to_string()),
        Some(Err(e)) => return error_response(StatusCode::BAD_GATEWAY, e.to_string()),
        None => {
            return error_response(
                StatusCode::INTERNAL_SERVER_ERROR,
                "generation ended unexpectedly",
            )
        }
    };

    let stream = futures::stream::unfold(
        (Some(first), rx, false),
        |(pending, mut rx, finished)| async move {
            if finished {
                return None;
            }
            let next = match pending {
                Some(ev) => Some(Ok(ev)),
                None => rx.recv().await,
            };
            let event = match next? {
                Ok(ev) => ev,
                Err(e) => StreamEvent::done(
                    String::new(),
                    None,
                    Some(format!("502 backend failure: {e}")),
                ),
            };
            let done = event.done;
            Some((Ok::<_, Infallible>(ndjson_line(&event)), (None, rx, done)))
        },
    );

    Response::builder()
        .status(StatusCode::OK)
        .header(header::CONTENT_TYPE, "application/x-ndjson")
        .body(Body::from_stream(stream))
        .expect("valid response")
}

async fn handle_score(State(state): State<AppState>, body: Bytes) -> Response {
    let req: ScoreRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, format!("invalid request: {e}")),
    };
    let config = match req.guidance() {
        Ok(c) => c,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, e),
    };
    let tasks = match parse_tasks(&req.tasks) {
        Ok(t) => t,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let Some(model) = state.registry.get(req.model.as_deref()) else {
        return error_response(StatusCode::BAD_REQUEST, "unknown model");
    };
    let permit = state
        .limiter
        .clone()
        .acquire_owned()
        .await
        .expect("semaphore never closes");
    let result = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        evaluate_taskset(model.as_ref(), &tasks, &config).and_then(|r| r.to_json())
    })
    .await;
    match result {
        Ok(Ok(json)) => ([(header::CONTENT_TYPE, "application/json")], json).into_response(),
        Ok(Err(e @ (Error::InvalidArgs(_) | Error::TokenOutOfRange { .. }))) => {
            error_response(StatusCode::BAD_REQUEST, e.to_string())
        }
        Ok(Err(e)) => error_response(StatusCode::BAD_GATEWAY, e.to_string()),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// Serves until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::ContextMode;

    fn msg(role: Role, text: &str) -> Message {
        Message {
            role,
            text: text.into(),
        }
    }

    fn request() -> GenerateRequest {
        serde_json::from_str(
            r#"{"system_prompt": "Be brief.", "messages": [{"role": "user", "text": "hi"}], "gamma": 2.0}"#,
        )
        .unwrap()
    }

    #[test]
    fn chat_template() {
        let text = render_chat(
            "sys",
            &[
                msg(Role::User, "a"),
                msg(Role::Assistant, "b"),
                msg(Role::User, "c"),
            ],
        );
        assert_eq!(
            text,
            "SYSTEM:\nsys\n\nUSER:\na\n\nASSISTANT:\nb\n\nUSER:\nc\n\nASSISTANT:\n"
        );
    }

    #[test]
    fn negative_rendering_becomes_the_whole_uncond_context() {
        let mut req = request();
        req.negative_system_prompt = Some("Be verbose.".into());
        let cfg = req.guidance().unwrap();
        let ctx = crate::guidance::init_dual_context(&req.prompt(), &cfg).unwrap();
        assert_eq!(
            ctx.uncond,
            encode(render_chat("Be verbose.", &req.messages))
        );
        assert_eq!(ctx.cond, encode(render_chat("Be brief.", &req.messages)));
        assert_eq!(cfg.mode, ContextMode::NegativePrompt);
    }

    #[test]
    fn validation() {
        let mut req = request();
        assert!(req.validate().is_ok());
        req.messages.push(msg(Role::User, "again"));
        assert!(req.validate().is_err());
        let mut req = request();
        req.gamma = -1.0;
        assert!(req.validate().is_err());
        let mut req = request();
        req.top_k = Some(3);
        req.top_p = Some(0.9);
        assert!(req.validate().is_err());
        let mut req = request();
        req.max_tokens = 0;
        assert!(req.validate().is_err());
        let mut req = request();
        req.messages.clear();
        assert!(req.validate().is_err());
    }

    #[test]
    fn sampler_fields_map_to_strategies() {
        let mut req = request();
        assert_eq!(req.strategy().unwrap(), Strategy::Greedy);
        req.temperature = Some(0.6);
        assert_eq!(
            req.strategy().unwrap(),
            Strategy::Temperature { temperature: 0.6 }
        );
        req.top_p = Some(0.9);
        assert_eq!(
            req.strategy().unwrap(),
            Strategy::TopP {
                p: 0.9,
                temperature: 0.6
            }
        );
    }
}
