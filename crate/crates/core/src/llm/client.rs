use std::sync::{Arc, Condvar, Mutex};

use reqwest::blocking::Client;
use serde::Deserialize;

use super::{GatewayConfig, LlmRequest, LlmResponse, Step, Usage};
use crate::error::{Error, Result};
use crate::http::{self, RetryPolicy};

/// Anything that can answer a single-turn chat completion.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse>;
}

/// OpenAI-compatible `/chat/completions` client.
#[derive(Debug, Clone)]
pub struct OpenAiBackend {
    pub base_url: String,
    pub api_key: Option<String>,
    pub retry: RetryPolicy,
    client: Client,
}

impl OpenAiBackend {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key,
            retry: RetryPolicy::default(),
            client: Client::new(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

#[derive(Deserialize)]
struct ChatReply {
    choices: Vec<ChatChoice>,
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

impl ChatBackend for OpenAiBackend {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse> {
        let body = serde_json::json!({
            "model": request.model_name,
            "messages": [{ "role": "user", "content": request.prompt }],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let url = http::endpoint(&self.base_url, "chat/completions");
        let value = http::post_json(&self.client, &url, self.api_key.as_deref(), &body, self.retry)?;
        let reply: ChatReply = serde_json::from_value(value).map_err(|e| Error::MalformedReply(e.to_string()))?;
        let usage = reply
            .usage
            .ok_or_else(|| Error::MalformedReply("missing usage block".into()))?;
        let text = reply
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Error::MalformedReply("no message content".into()))?;
        Ok(LlmResponse {
            text,
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
        })
    }
}

struct Limiter {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl Limiter {
    fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut n = self.in_flight.lock().expect("limiter lock");
            while *n >= self.max {
                n = self.freed.wait(n).expect("limiter lock");
            }
            *n += 1;
        }
        let out = f();
        *self.in_flight.lock().expect("limiter lock") -= 1;
        self.freed.notify_one();
        out
    }
}

/// Backend plus per-step parameters, a concurrency cap and a usage meter.
pub struct LlmGateway {
    backend: Arc<dyn ChatBackend>,
    pub config: GatewayConfig,
    limiter: Limiter,
    usage: Mutex<Usage>,
}

impl LlmGateway {
    pub fn new(backend: Arc<dyn ChatBackend>, config: GatewayConfig) -> Self {
        let limiter = Limiter::new(config.concurrency);
        Self {
            backend,
            config,
            limiter,
            usage: Mutex::new(Usage::default()),
        }
    }

    pub fn complete(&self, request: &LlmRequest) -> Result<LlmResponse> {
        request.validate()?;
        let resp = self.limiter.run(|| self.backend.complete(request))?;
        *self.usage.lock().expect("usage lock") += resp.usage();
        Ok(resp)
    }

    /// Completes `prompt` with the step's configured parameters.
    pub fn run_step(&self, step: Step, prompt: String) -> Result<LlmResponse> {
        let params = self.config.params(step);
        self.complete(&LlmRequest {
            model_name: self.config.model_name.clone(),
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            prompt,
        })
    }

    /// Total usage metered since construction.
    pub fn usage(&self) -> Usage {
        *self.usage.lock().expect("usage lock")
    }
}
