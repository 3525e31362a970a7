use std::time::Duration;

use serde_json::{json, Value};

use super::{
    default_api_key_env, CompletionBackend, CompletionRequest, CompletionResult, GatewayError, ModelDescriptor,
    RemoteEndpoint,
};

/// Chat-completions client: one system message carrying the profile and one
/// user message carrying the prompt. Token counts are taken from the
/// endpoint's `usage` block and never estimated locally.
#[derive(Debug)]
pub struct RemoteBackend {
    endpoint: RemoteEndpoint,
    client: reqwest::blocking::Client,
}

impl RemoteBackend {
    pub fn new(endpoint: RemoteEndpoint) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(endpoint.timeout_s.max(1)))
            .build()
            .expect("http client");
        RemoteBackend { endpoint, client }
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.endpoint.base_url.trim_end_matches('/'))
    }
}

/// JSON body for one chat call. The system message is omitted when the
/// profile is empty.
pub fn chat_request_body(wire_model: &str, request: &CompletionRequest) -> Value {
    let mut messages = Vec::with_capacity(2);
    if !request.profile.is_empty() {
        messages.push(json!({ "role": "system", "content": request.profile }));
    }
    messages.push(json!({ "role": "user", "content": request.prompt }));
    let mut body = json!({
        "model": wire_model,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_output_tokens,
    });
    if !request.stop_sequences.is_empty() {
        body["stop"] = json!(request.stop_sequences);
    }
    body
}

fn parse_reply(body: &Value) -> Result<(String, u64, u64), GatewayError> {
    let text = body
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| GatewayError::MalformedReply("missing choices[0].message.content".into()))?;
    let usage = |key: &str| {
        body.pointer(&format!("/usage/{key}"))
            .and_then(Value::as_u64)
            .ok_or_else(|| GatewayError::MalformedReply(format!("missing usage.{key}")))
    };
    Ok((text.to_string(), usage("prompt_tokens")?, usage("completion_tokens")?))
}

impl CompletionBackend for RemoteBackend {
    fn complete(&self, model: &ModelDescriptor, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        let key_var = self.endpoint.api_key_env.clone().unwrap_or_else(|| default_api_key_env(&model.id));
        let key = std::env::var(&key_var).map_err(|_| GatewayError::MissingCredentials(key_var))?;
        let wire_model = self.endpoint.model_name.as_deref().unwrap_or(&model.id);

        let response = self
            .client
            .post(self.url())
            .bearer_auth(key)
            .json(&chat_request_body(wire_model, request))
            .send()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;

        let status = response.status();
        if status.as_u16() == 429 {
            let retry_after_ms = response
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<f64>().ok())
                .map(|secs| (secs * 1000.0) as u64);
            return Err(GatewayError::RateLimited { retry_after_ms });
        }
        let text = response.text().map_err(|e| GatewayError::Transport(e.to_string()))?;
        if !status.is_success() {
            let snippet: String = text.chars().take(200).collect();
            return Err(GatewayError::Transport(format!("HTTP {status}: {snippet}")));
        }
        let body: Value = serde_json::from_str(&text).map_err(|e| GatewayError::MalformedReply(e.to_string()))?;
        let (text, tokens_in, tokens_out) = parse_reply(&body)?;
        Ok(CompletionResult { text, tokens_in, tokens_out, model_id: model.id.clone(), latency_ms: 0 })
    }
}
