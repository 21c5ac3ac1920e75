//! Chat-completion access for the KC pipeline: prompt templates, a
//! disk-backed response cache, structured-output parsing with one
//! automatic re-prompt, and two providers (a deterministic mock for
//! offline runs and an HTTP client for live endpoints).

pub mod cache;
pub mod http;
pub mod mock;
pub mod parse;
pub mod template;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use cache::{CachedExchange, DiskCache};
pub use http::{HttpConfig, HttpProvider};
pub use mock::MockProvider;
pub use template::{format_few_shot_examples, format_solutions_block, render_prompt};

/// The prompt templates shipped with the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateId {
    KcGeneration,
    ClusterLabel,
    KcErrorLabel,
    TagConversion,
}

impl TemplateId {
    pub fn as_str(&self) -> &'static str {
        match self {
            TemplateId::KcGeneration => "kc-generation",
            TemplateId::ClusterLabel => "cluster-label",
            TemplateId::KcErrorLabel => "kc-error-label",
            TemplateId::TagConversion => "tag-conversion",
        }
    }

    pub const ALL: [TemplateId; 4] = [
        TemplateId::KcGeneration,
        TemplateId::ClusterLabel,
        TemplateId::KcErrorLabel,
        TemplateId::TagConversion,
    ];
}

impl std::fmt::Display for TemplateId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Decode controls sent with each request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl Default for SamplingParams {
    fn default() -> Self {
        // Temperature 0 keeps pipeline runs reproducible.
        SamplingParams {
            temperature: 0.0,
            top_p: 1.0,
            max_tokens: 2048,
        }
    }
}

/// A single-turn system+user chat request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    /// Which template produced this request, when one did; part of the
    /// cache key.
    pub template_id: Option<TemplateId>,
    pub system_message: String,
    pub user_message: String,
    pub sampling: SamplingParams,
    pub provider_model_id: String,
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<()> {
        if self.system_message.is_empty() || self.user_message.is_empty() {
            return Err(Error::domain("chat messages must be non-empty"));
        }
        if self.sampling.temperature < 0.0 {
            return Err(Error::domain("temperature must be non-negative"));
        }
        Ok(())
    }
}

/// A chat-completion backend. Implementations must be safe for concurrent
/// callers.
pub trait ChatProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    fn complete(&self, request: &ChatRequest) -> Result<String>;
}

/// Provider wrapper that adds response caching and structured-output
/// parsing with one automatic re-prompt.
pub struct ChatClient {
    provider: Box<dyn ChatProvider>,
    cache: Option<DiskCache>,
}

impl ChatClient {
    pub fn new(provider: Box<dyn ChatProvider>) -> Self {
        ChatClient {
            provider,
            cache: None,
        }
    }

    pub fn with_cache(mut self, cache: DiskCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn provider_id(&self) -> &str {
        self.provider.provider_id()
    }

    /// Complete a request, serving byte-identical replays from the cache
    /// when one is configured. Provider failures are never cached.
    pub fn complete(&self, request: &ChatRequest) -> Result<String> {
        request.validate()?;
        let key = cache::cache_key(request);
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&key)? {
                return Ok(hit.response);
            }
        }
        let response = self.provider.complete(request)?;
        if let Some(cache) = &self.cache {
            cache.put(&key, &response)?;
        }
        Ok(response)
    }

    /// Complete and parse. On a schema violation the request is retried
    /// once with a terse format reminder appended; a second violation
    /// surfaces the error.
    pub fn complete_structured<T>(
        &self,
        request: &ChatRequest,
        parser: impl Fn(&str) -> Result<T>,
    ) -> Result<T> {
        let response = self.complete(request)?;
        match parser(&response) {
            Ok(value) => Ok(value),
            Err(Error::StructuredOutput { .. }) => {
                let mut retry = request.clone();
                retry.user_message = format!(
                    "{}\n\nYour previous response did not follow the required format. Follow the JSON template exactly.",
                    request.user_message
                );
                let response = self.complete(&retry)?;
                parser(&response)
            }
            Err(other) => Err(other),
        }
    }
}
