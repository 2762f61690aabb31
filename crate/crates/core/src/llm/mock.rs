//! Scripted backend for deterministic runs without a live model.
//!
//! A script is JSON:
//!
//! ```json
//! {
//!   "rules": [
//!     { "step": "diagnosis", "contains": ["How many singers"], "responses": ["e3"] },
//!     { "fingerprint": "0f3a9c1d2b4e5f60", "responses": [{ "text": "SELECT 1", "prompt_tokens": 40 }] }
//!   ],
//!   "sequence": ["SELECT 1"],
//!   "fallback": "e5"
//! }
//! ```
//!
//! The first rule whose conditions all hold answers the prompt. Each rule
//! walks its own `responses` list and repeats the last one once exhausted.
//! Unmatched prompts consume `sequence` in call order, then `fallback`.
//! Token counts default to one token per four characters.

use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{approx_tokens, ChatBackend, LlmRequest, LlmResponse, Step};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockResponse {
    Text(String),
    Detailed {
        text: String,
        #[serde(default)]
        prompt_tokens: Option<u64>,
        #[serde(default)]
        completion_tokens: Option<u64>,
    },
    /// Simulated backend failure: `auth`, `rate_limit` or anything else for
    /// a transport error.
    Failure { error: String },
}

impl MockResponse {
    fn answer(&self, prompt: &str) -> Result<LlmResponse> {
        let (text, p, c) = match self {
            MockResponse::Text(t) => (t, None, None),
            MockResponse::Detailed {
                text,
                prompt_tokens,
                completion_tokens,
            } => (text, *prompt_tokens, *completion_tokens),
            MockResponse::Failure { error } => {
                return Err(match error.as_str() {
                    "auth" => Error::Auth("scripted".into()),
                    "rate_limit" => Error::RateLimited { attempts: 3 },
                    other => Error::Transport(format!("scripted: {other}")),
                })
            }
        };
        Ok(LlmResponse {
            text: text.clone(),
            prompt_tokens: p.unwrap_or(approx_tokens(prompt) as u64),
            completion_tokens: c.unwrap_or(approx_tokens(text) as u64),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<Step>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    pub responses: Vec<MockResponse>,
}

impl MockRule {
    fn matches(&self, prompt: &str) -> bool {
        self.step.is_none_or(|s| Step::of_prompt(prompt) == Some(s))
            && self.contains.iter().all(|c| prompt.contains(c.as_str()))
            && self
                .fingerprint
                .as_ref()
                .is_none_or(|f| *f == MockScript::fingerprint(prompt))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub sequence: Vec<MockResponse>,
    #[serde(default)]
    pub fallback: Option<MockResponse>,
}

impl MockScript {
    /// First 16 hex digits of the prompt's SHA-256.
    pub fn fingerprint(prompt: &str) -> String {
        Sha256::digest(prompt.as_bytes())
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("mock script", e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("script serializes")
    }
}

#[derive(Debug)]
struct Cursors {
    rules: Vec<usize>,
    sequence: usize,
}

#[derive(Debug)]
pub struct MockBackend {
    script: MockScript,
    cursors: Mutex<Cursors>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        let cursors = Cursors {
            rules: vec![0; script.rules.len()],
            sequence: 0,
        };
        Self {
            script,
            cursors: Mutex::new(cursors),
        }
    }

    /// Always answers `text`.
    pub fn fixed(text: impl Into<String>) -> Self {
        Self::new(MockScript {
            fallback: Some(MockResponse::Text(text.into())),
            ..Default::default()
        })
    }

    fn pick(&self, prompt: &str) -> Option<MockResponse> {
        let mut cur = self.cursors.lock().expect("mock lock");
        if let Some(i) = self.script.rules.iter().position(|r| r.matches(prompt)) {
            let responses = &self.script.rules[i].responses;
            let idx = cur.rules[i].min(responses.len().checked_sub(1)?);
            cur.rules[i] += 1;
            return responses.get(idx).cloned();
        }
        if cur.sequence < self.script.sequence.len() {
            cur.sequence += 1;
            return Some(self.script.sequence[cur.sequence - 1].clone());
        }
        self.script.fallback.clone()
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse> {
        let response = self.pick(&request.prompt).ok_or_else(|| {
            Error::MalformedReply(format!(
                "mock script has no response for {} prompt {}",
                Step::of_prompt(&request.prompt).map_or("unknown", Step::as_str),
                MockScript::fingerprint(&request.prompt)
            ))
        })?;
        response.answer(&request.prompt)
    }
}
