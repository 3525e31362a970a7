//! Uniform access to text-completion backends.
//!
//! A [`ModelGateway`] maps model ids to backends. Every successful call goes
//! through [`ModelGateway::complete`], which records exactly one
//! [`UsageEvent`](crate::ledger::UsageEvent) in the caller's ledger. The
//! gateway never looks at the returned text.

mod remote;
mod scripted;

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{CostLedger, EventId, UsageEvent, UsagePurpose};
use crate::money::Price;

pub use remote::{chat_request_body, RemoteBackend};
pub use scripted::ScriptedBackend;

/// Default cap on generated tokens per call.
pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 4096;

/// Default per-call timeout for remote endpoints.
pub const DEFAULT_TIMEOUT_S: u64 = 120;

/// Transport-level retries on rate limiting, separate from format retries.
pub const RATE_LIMIT_RETRIES: u32 = 3;

/// One model tier: identity, pricing, format-retry budget and where it lives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub id: String,
    /// Position in the cascade, 0 = cheapest. Assigned by the cascade config.
    #[serde(default)]
    pub tier_rank: usize,
    pub price_per_input_token: Price,
    pub price_per_output_token: Price,
    pub max_format_retries: u32,
    pub endpoint: Endpoint,
}

impl ModelDescriptor {
    pub fn is_free(&self) -> bool {
        self.price_per_input_token.is_zero() && self.price_per_output_token.is_zero()
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.id.trim().is_empty() {
            return Err(GatewayError::InvalidModel("model id is empty".into()));
        }
        if self.price_per_input_token.is_negative() || self.price_per_output_token.is_negative() {
            return Err(GatewayError::InvalidModel(format!("{}: prices must be >= 0", self.id)));
        }
        if self.max_format_retries < 1 {
            return Err(GatewayError::InvalidModel(format!("{}: max_format_retries must be >= 1", self.id)));
        }
        Ok(())
    }

    /// A scripted descriptor with zero prices. Mostly for tests.
    pub fn scripted(id: &str, max_format_retries: u32, replies: Vec<String>) -> Self {
        ModelDescriptor {
            id: id.to_string(),
            tier_rank: 0,
            price_per_input_token: Price::ZERO,
            price_per_output_token: Price::ZERO,
            max_format_retries,
            endpoint: Endpoint::Scripted(ScriptedEndpoint { replies, chars_per_token: 4 }),
        }
    }

    pub fn with_prices(mut self, input: Price, output: Price) -> Self {
        self.price_per_input_token = input;
        self.price_per_output_token = output;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Endpoint {
    Remote(RemoteEndpoint),
    Scripted(ScriptedEndpoint),
}

/// A chat-completions style HTTP endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteEndpoint {
    pub base_url: String,
    /// Model name sent on the wire. Defaults to the descriptor id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    /// Environment variable holding the API key. Defaults to
    /// [`default_api_key_env`] of the model id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_s: u64,
}

fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_S
}

/// `gpt-4-0125-preview` -> `GPT_4_0125_PREVIEW_API_KEY`.
pub fn default_api_key_env(model_id: &str) -> String {
    let mut name: String =
        model_id.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' }).collect();
    name.push_str("_API_KEY");
    name
}

/// Canned replies served in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedEndpoint {
    pub replies: Vec<String>,
    #[serde(default = "default_chars_per_token")]
    pub chars_per_token: u32,
}

fn default_chars_per_token() -> u32 {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    /// System prompt; empty means no system message.
    pub profile: String,
    pub prompt: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
}

impl CompletionRequest {
    pub fn new(profile: impl Into<String>, prompt: impl Into<String>, temperature: f64) -> Self {
        CompletionRequest {
            profile: profile.into(),
            prompt: prompt.into(),
            temperature,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            stop_sequences: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.prompt.is_empty() {
            return Err(GatewayError::InvalidRequest("prompt is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!("temperature {} outside [0, 1]", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub model_id: String,
    pub latency_ms: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited (retry after {retry_after_ms:?} ms)")]
    RateLimited { retry_after_ms: Option<u64> },
    #[error("scripted backend for {model_id} has no queued response")]
    ScriptExhausted { model_id: String },
    #[error("missing credentials: environment variable {0} is not set")]
    MissingCredentials(String),
    #[error("no backend registered for model {0}")]
    UnknownModel(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid model descriptor: {0}")]
    InvalidModel(String),
    #[error("malformed reply from endpoint: {0}")]
    MalformedReply(String),
}

impl GatewayError {
    /// Errors that no amount of retrying will fix; the run must stop.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            GatewayError::ScriptExhausted { .. }
                | GatewayError::MissingCredentials(_)
                | GatewayError::UnknownModel(_)
                | GatewayError::InvalidModel(_)
                | GatewayError::InvalidRequest(_)
        )
    }
}

/// A text-completion backend. Implementations report token usage; they do
/// not record it.
pub trait CompletionBackend: Send + Sync {
    fn complete(&self, model: &ModelDescriptor, request: &CompletionRequest) -> Result<CompletionResult, GatewayError>;
}

/// Who pays for a call and why.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageTag {
    pub run_id: String,
    pub step_index: usize,
    pub purpose: UsagePurpose,
}

#[derive(Clone)]
pub struct ModelGateway {
    backends: HashMap<String, Arc<dyn CompletionBackend>>,
    scripted: HashMap<String, Arc<ScriptedBackend>>,
    backoff_base: Duration,
}

impl std::fmt::Debug for ModelGateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut ids: Vec<_> = self.backends.keys().collect();
        ids.sort();
        f.debug_struct("ModelGateway").field("models", &ids).finish()
    }
}

impl Default for ModelGateway {
    fn default() -> Self {
        ModelGateway { backends: HashMap::new(), scripted: HashMap::new(), backoff_base: Duration::from_secs(1) }
    }
}

impl ModelGateway {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a fresh backend for every descriptor. Scripted endpoints get a
    /// new queue, so two gateways built from the same descriptors replay the
    /// same script independently.
    pub fn from_models<'a>(models: impl IntoIterator<Item = &'a ModelDescriptor>) -> Self {
        let mut gateway = ModelGateway::new();
        for model in models {
            match &model.endpoint {
                Endpoint::Scripted(ep) => {
                    let backend = Arc::new(ScriptedBackend::new(ep.replies.clone(), ep.chars_per_token));
                    gateway.scripted.insert(model.id.clone(), backend.clone());
                    gateway.backends.insert(model.id.clone(), backend);
                }
                Endpoint::Remote(ep) => {
                    gateway.backends.insert(model.id.clone(), Arc::new(RemoteBackend::new(ep.clone())));
                }
            }
        }
        gateway
    }

    pub fn register(&mut self, model_id: &str, backend: Arc<dyn CompletionBackend>) {
        self.scripted.remove(model_id);
        self.backends.insert(model_id.to_string(), backend);
    }

    pub fn register_scripted(&mut self, model_id: &str, backend: Arc<ScriptedBackend>) {
        self.backends.insert(model_id.to_string(), backend.clone());
        self.scripted.insert(model_id.to_string(), backend);
    }

    /// The scripted backend serving `model_id`, for inspecting recorded requests.
    pub fn scripted(&self, model_id: &str) -> Option<Arc<ScriptedBackend>> {
        self.scripted.get(model_id).cloned()
    }

    pub fn set_backoff_base(&mut self, base: Duration) {
        self.backoff_base = base;
    }

    /// Runs one completion and records its usage. Rate limiting is retried
    /// here with exponential backoff; other failures surface immediately.
    pub fn complete(
        &self,
        model: &ModelDescriptor,
        request: &CompletionRequest,
        tag: &UsageTag,
        ledger: &mut CostLedger,
    ) -> Result<(CompletionResult, EventId), GatewayError> {
        request.validate()?;
        let backend = self.backends.get(&model.id).ok_or_else(|| GatewayError::UnknownModel(model.id.clone()))?;

        let started = Instant::now();
        let mut retries = 0;
        let mut result = loop {
            match backend.complete(model, request) {
                Ok(r) => break r,
                Err(GatewayError::RateLimited { retry_after_ms }) if retries < RATE_LIMIT_RETRIES => {
                    let backoff = self.backoff_base * 2u32.pow(retries);
                    let hinted = Duration::from_millis(retry_after_ms.unwrap_or(0));
                    tracing::warn!(model = %model.id, ?backoff, "rate limited, retrying");
                    std::thread::sleep(backoff.max(hinted));
                    retries += 1;
                }
                Err(e) => return Err(e),
            }
        };
        result.model_id = model.id.clone();
        result.latency_ms = started.elapsed().as_millis() as u64;

        let id = ledger.record(UsageEvent {
            id: 0,
            run_id: tag.run_id.clone(),
            step_index: tag.step_index,
            model_id: model.id.clone(),
            purpose: tag.purpose,
            tokens_in: result.tokens_in,
            tokens_out: result.tokens_out,
            temperature: request.temperature,
            profile: request.profile.clone(),
        });
        Ok((result, id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    fn tag() -> UsageTag {
        UsageTag { run_id: "r".into(), step_index: 0, purpose: UsagePurpose::Planning }
    }

    #[test]
    fn scripted_passthrough_records_one_event() {
        let model = ModelDescriptor::scripted("m", 1, vec!["hello".into()]);
        let gw = ModelGateway::from_models([&model]);
        let mut ledger = CostLedger::new();
        let (res, id) = gw.complete(&model, &CompletionRequest::new("", "hi there", 0.2), &tag(), &mut ledger).unwrap();
        assert_eq!(res.text, "hello");
        assert_eq!(res.model_id, "m");
        assert_eq!(res.tokens_in, 2);
        assert_eq!(res.tokens_out, 2);
        assert_eq!(ledger.events().len(), 1);
        assert_eq!(ledger.events()[0].id, id);
    }

    #[test]
    fn exhausted_script_is_fatal_and_not_billed() {
        let model = ModelDescriptor::scripted("m", 1, vec![]);
        let gw = ModelGateway::from_models([&model]);
        let mut ledger = CostLedger::new();
        let err = gw.complete(&model, &CompletionRequest::new("", "x", 0.2), &tag(), &mut ledger).unwrap_err();
        assert_eq!(err, GatewayError::ScriptExhausted { model_id: "m".into() });
        assert!(err.is_fatal());
        assert!(ledger.events().is_empty());
    }

    #[test]
    fn rejects_bad_requests() {
        let model = ModelDescriptor::scripted("m", 1, vec!["a".into()]);
        let gw = ModelGateway::from_models([&model]);
        let mut ledger = CostLedger::new();
        let empty = CompletionRequest::new("", "", 0.2);
        assert!(matches!(gw.complete(&model, &empty, &tag(), &mut ledger), Err(GatewayError::InvalidRequest(_))));
        let hot = CompletionRequest::new("", "p", 1.5);
        assert!(matches!(gw.complete(&model, &hot, &tag(), &mut ledger), Err(GatewayError::InvalidRequest(_))));
    }

    struct Flaky {
        failures: Mutex<u32>,
    }

    impl CompletionBackend for Flaky {
        fn complete(&self, _: &ModelDescriptor, _: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
            let mut left = self.failures.lock().unwrap();
            if *left > 0 {
                *left -= 1;
                return Err(GatewayError::RateLimited { retry_after_ms: Some(1) });
            }
            Ok(CompletionResult {
                text: "ok".into(),
                tokens_in: 1,
                tokens_out: 1,
                model_id: String::new(),
                latency_ms: 0,
            })
        }
    }

    #[test]
    fn rate_limits_retried_up_to_three_times() {
        let model = ModelDescriptor::scripted("m", 1, vec![]);
        let mut gw = ModelGateway::new();
        gw.set_backoff_base(Duration::from_millis(1));
        gw.register("m", Arc::new(Flaky { failures: Mutex::new(3) }));
        let mut ledger = CostLedger::new();
        let req = CompletionRequest::new("", "p", 0.2);
        assert!(gw.complete(&model, &req, &tag(), &mut ledger).is_ok());
        assert_eq!(ledger.events().len(), 1);

        gw.register("m", Arc::new(Flaky { failures: Mutex::new(4) }));
        assert!(matches!(gw.complete(&model, &req, &tag(), &mut ledger), Err(GatewayError::RateLimited { .. })));
        assert_eq!(ledger.events().len(), 1);
    }

    #[test]
    fn descriptor_validation() {
        let mut m = ModelDescriptor::scripted("m", 0, vec![]);
        assert!(m.validate().is_err());
        m.max_format_retries = 1;
        assert!(m.validate().is_ok());
        assert!(m.is_free());
    }

    #[test]
    fn api_key_env_naming() {
        assert_eq!(default_api_key_env("gpt-4-0125-preview"), "GPT_4_0125_PREVIEW_API_KEY");
    }
}
