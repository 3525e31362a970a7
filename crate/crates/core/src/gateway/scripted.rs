use std::collections::VecDeque;
use std::sync::Mutex;

use super::{CompletionBackend, CompletionRequest, CompletionResult, GatewayError, ModelDescriptor};

/// Deterministic backend that pops canned replies in FIFO order.
///
/// Token counts come from a chars-per-token stub: `ceil(chars / ratio)`.
/// Every served request is kept so tests can inspect prompts, profiles and
/// temperatures after a run.
#[derive(Debug)]
pub struct ScriptedBackend {
    queue: Mutex<VecDeque<String>>,
    chars_per_token: u32,
    seen: Mutex<Vec<CompletionRequest>>,
}

impl ScriptedBackend {
    pub fn new<I, S>(replies: I, chars_per_token: u32) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedBackend {
            queue: Mutex::new(replies.into_iter().map(Into::into).collect()),
            chars_per_token: chars_per_token.max(1),
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn count_tokens(&self, text: &str) -> u64 {
        let chars = text.chars().count() as u64;
        chars.div_ceil(u64::from(self.chars_per_token))
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().expect("script queue poisoned").len()
    }

    /// Requests served so far, in call order.
    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.seen.lock().expect("request log poisoned").clone()
    }
}

impl CompletionBackend for ScriptedBackend {
    fn complete(&self, model: &ModelDescriptor, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        let reply = self
            .queue
            .lock()
            .expect("script queue poisoned")
            .pop_front()
            .ok_or_else(|| GatewayError::ScriptExhausted { model_id: model.id.clone() })?;
        self.seen.lock().expect("request log poisoned").push(request.clone());
        Ok(CompletionResult {
            tokens_in: self.count_tokens(&request.prompt),
            tokens_out: self.count_tokens(&reply),
            text: reply,
            model_id: model.id.clone(),
            latency_ms: 0,
        })
    }
}
