//! JSON-over-HTTP POST with retry and exponential backoff, shared by the
//! chat-completion and embedding clients.

use std::thread;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles afterwards.
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay_ms: 500,
        }
    }
}

enum Failure {
    Retryable(Error),
    Fatal(Error),
}

fn attempt(client: &Client, url: &str, api_key: Option<&str>, body: &serde_json::Value) -> Result<serde_json::Value, Failure> {
    let mut req = client.post(url).json(body);
    if let Some(key) = api_key {
        req = req.bearer_auth(key);
    }
    let resp = req
        .send()
        .map_err(|e| Failure::Retryable(Error::Transport(e.to_string())))?;
    let status = resp.status();
    let text = resp
        .text()
        .map_err(|e| Failure::Retryable(Error::Transport(e.to_string())))?;
    match status {
        s if s.is_success() => serde_json::from_str(&text)
            .map_err(|e| Failure::Fatal(Error::MalformedReply(format!("{e}: {}", truncate(&text))))),
        StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => Err(Failure::Fatal(Error::Auth(truncate(&text)))),
        StatusCode::TOO_MANY_REQUESTS => Err(Failure::Retryable(Error::RateLimited { attempts: 0 })),
        s if s.is_server_error() || s == StatusCode::REQUEST_TIMEOUT => {
            Err(Failure::Retryable(Error::Transport(format!("HTTP {s}: {}", truncate(&text)))))
        }
        s => Err(Failure::Fatal(Error::MalformedReply(format!("HTTP {s}: {}", truncate(&text))))),
    }
}

fn truncate(s: &str) -> String {
    crate::case::elide(s, 200)
}

pub fn post_json(
    client: &Client,
    url: &str,
    api_key: Option<&str>,
    body: &serde_json::Value,
    retry: RetryPolicy,
) -> Result<serde_json::Value> {
    let attempts = retry.max_attempts.max(1);
    let mut delay = retry.base_delay_ms;
    for n in 1..=attempts {
        match attempt(client, url, api_key, body) {
            Ok(v) => return Ok(v),
            Err(Failure::Fatal(e)) => return Err(e),
            Err(Failure::Retryable(e)) if n == attempts => {
                return Err(match e {
                    Error::RateLimited { .. } => Error::RateLimited { attempts },
                    other => other,
                })
            }
            Err(Failure::Retryable(_)) => {
                thread::sleep(Duration::from_millis(delay));
                delay = delay.saturating_mul(2);
            }
        }
    }
    unreachable!("loop returns on the last attempt")
}

/// Joins a base URL and a path segment with exactly one slash.
pub fn endpoint(base_url: &str, path: &str) -> String {
    format!("{}/{}", base_url.trim_end_matches('/'), path.trim_start_matches('/'))
}

pub fn api_key_from_env(var: &str) -> Option<String> {
    std::env::var(var).ok().filter(|k| !k.is_empty())
}
