//! Live chat provider speaking the common chat-completions wire format.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

use super::{ChatProvider, ChatRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    /// Environment variable holding the bearer token; unset means no
    /// Authorization header is sent.
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    /// Retries after the initial attempt, for timeouts, 429s, and 5xx.
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    /// Token-bucket rate limit: burst capacity and sustained requests per
    /// second.
    pub rate_capacity: u32,
    pub rate_per_sec: f64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            endpoint: String::new(),
            api_key_env: None,
            timeout_secs: 120,
            max_retries: 3,
            backoff_base_ms: 250,
            rate_capacity: 4,
            rate_per_sec: 2.0,
        }
    }
}

struct TokenBucket {
    tokens: f64,
    capacity: f64,
    per_sec: f64,
    last_refill: Instant,
}

impl TokenBucket {
    fn new(capacity: u32, per_sec: f64) -> Self {
        TokenBucket {
            tokens: capacity as f64,
            capacity: capacity as f64,
            per_sec,
            last_refill: Instant::now(),
        }
    }

    fn refill(&mut self, now: Instant) {
        let elapsed = now.duration_since(self.last_refill).as_secs_f64();
        self.tokens = (self.tokens + elapsed * self.per_sec).min(self.capacity);
        self.last_refill = now;
    }

    /// How long to wait before one token is available; takes the token.
    fn take(&mut self, now: Instant) -> Duration {
        self.refill(now);
        if self.tokens >= 1.0 {
            self.tokens -= 1.0;
            Duration::ZERO
        } else {
            let deficit = 1.0 - self.tokens;
            self.tokens = 0.0;
            Duration::from_secs_f64(deficit / self.per_sec)
        }
    }
}

pub struct HttpProvider {
    config: HttpConfig,
    client: reqwest::blocking::Client,
    bucket: Mutex<TokenBucket>,
    id: String,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: [WireMessage<'a>; 2],
    temperature: f64,
    top_p: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireResponseMessage,
}

#[derive(Deserialize)]
struct WireResponseMessage {
    content: String,
}

impl HttpProvider {
    pub fn new(config: HttpConfig) -> Result<Self> {
        if config.endpoint.is_empty() {
            return Err(Error::domain("http provider requires an endpoint URL"));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(HttpProvider {
            id: format!("http/{}", config.endpoint),
            bucket: Mutex::new(TokenBucket::new(config.rate_capacity, config.rate_per_sec)),
            client,
            config,
        })
    }

    fn api_key(&self) -> Result<Option<String>> {
        match &self.config.api_key_env {
            None => Ok(None),
            Some(var) => match std::env::var(var) {
                Ok(key) if !key.is_empty() => Ok(Some(key)),
                _ => Err(Error::Transport(format!(
                    "environment variable {var} is not set"
                ))),
            },
        }
    }

    fn throttle(&self) {
        let wait = self.bucket.lock().unwrap().take(Instant::now());
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }

    fn attempt(&self, request: &ChatRequest, key: Option<&str>) -> std::result::Result<String, (bool, Error)> {
        self.throttle();
        let body = WireRequest {
            model: &request.provider_model_id,
            messages: [
                WireMessage {
                    role: "system",
                    content: &request.system_message,
                },
                WireMessage {
                    role: "user",
                    content: &request.user_message,
                },
            ],
            temperature: request.sampling.temperature,
            top_p: request.sampling.top_p,
            max_tokens: request.sampling.max_tokens,
            seed: request.seed,
        };
        let mut builder = self.client.post(&self.config.endpoint).json(&body);
        if let Some(key) = key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| {
            // Connection failures and timeouts are worth retrying.
            (true, Error::Transport(format!("request failed: {e}")))
        })?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| (true, Error::Transport(format!("reading body failed: {e}"))))?;
        if !status.is_success() {
            let retryable = status.as_u16() == 429 || status.is_server_error();
            return Err((
                retryable,
                Error::Transport(format!("provider returned {status}: {text}")),
            ));
        }
        let parsed: WireResponse = serde_json::from_str(&text).map_err(|e| {
            (
                false,
                Error::Transport(format!("malformed provider response: {e}")),
            )
        })?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| {
                (
                    false,
                    Error::Transport("provider response contains no choices".to_string()),
                )
            })
    }
}

impl ChatProvider for HttpProvider {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<String> {
        request.validate()?;
        let key = self.api_key()?;
        let mut last_error = None;
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                let delay = self.config.backoff_base_ms.saturating_mul(1 << (attempt - 1));
                std::thread::sleep(Duration::from_millis(delay));
            }
            match self.attempt(request, key.as_deref()) {
                Ok(text) => return Ok(text),
                Err((retryable, error)) => {
                    if !retryable {
                        return Err(error);
                    }
                    log::warn!("provider attempt {} failed: {error}", attempt + 1);
                    last_error = Some(error);
                }
            }
        }
        Err(last_error.unwrap_or_else(|| Error::Transport("no attempts made".to_string())))
    }
}
