//! Chat-completions client with retries and bounded-parallel batching.
//!
//! All traffic goes through a [`Backend`]. Two are provided: an
//! OpenAI-compatible HTTP backend and an in-process scripted mock selected
//! with a `mock:<script path>` base URL.

pub mod http;
pub mod mock;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ChatMessage, GenerationTrace, RoleTag, SamplingParams, TokenLogprob};

pub use http::HttpBackend;
pub use mock::{MockBackend, MockScript, ScriptedCompletion};

/// top-k alternatives requested for P(true) scoring.
pub const DEFAULT_TOP_LOGPROBS: u32 = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    /// Environment variable holding the bearer token; `None` sends no auth header.
    #[serde(default)]
    pub api_key_env: Option<String>,
    pub model_name: String,
    /// Seconds.
    #[serde(default = "default_timeout")]
    pub request_timeout: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    /// Whether the endpoint accepts the non-standard `top_k` field.
    #[serde(default = "default_true")]
    pub supports_top_k: bool,
    /// Base of the exponential retry backoff, seconds.
    #[serde(default = "default_backoff")]
    pub backoff_base: f64,
}

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    3
}
fn default_parallel() -> usize {
    8
}
fn default_true() -> bool {
    true
}
fn default_backoff() -> f64 {
    0.5
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key_env: None,
            model_name: model_name.into(),
            request_timeout: default_timeout(),
            max_retries: default_retries(),
            max_parallel: default_parallel(),
            supports_top_k: true,
            backoff_base: default_backoff(),
        }
    }

    pub fn is_mock(&self) -> bool {
        self.base_url.starts_with("mock:")
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_parallel < 1 {
            return Err(Error::Config("max_parallel must be >= 1".into()));
        }
        if !(self.request_timeout > 0.0) {
            return Err(Error::Config("request_timeout must be > 0".into()));
        }
        if !(self.backoff_base >= 0.0) {
            return Err(Error::Config("backoff_base must be >= 0".into()));
        }
        if self.model_name.is_empty() {
            return Err(Error::Config("model_name is empty".into()));
        }
        Ok(())
    }

    /// Resolves the API key from the configured environment variable.
    pub fn api_key(&self) -> Result<Option<String>> {
        match &self.api_key_env {
            None => Ok(None),
            Some(var) if var.is_empty() => Ok(None),
            Some(var) => std::env::var(var).map(Some).map_err(|_| {
                Error::Config(format!(
                    "api key environment variable {var} is not set (endpoint {})",
                    self.base_url
                ))
            }),
        }
    }

    /// Sleep before retry number `attempt` (0-based): base * 2^attempt, +/-25% jitter.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let nominal = self.backoff_base * 2f64.powi(attempt as i32);
        let jitter = rand::thread_rng().gen_range(0.75..=1.25);
        Duration::from_secs_f64((nominal * jitter).max(0.0))
    }
}

/// One chat-completion request as the estimators and protocols issue it.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub item_id: String,
    pub role_tag: RoleTag,
    pub messages: Vec<ChatMessage>,
    pub sampling: SamplingParams,
    pub want_logprobs: bool,
    pub top_logprobs: u32,
}

impl ChatRequest {
    pub fn greedy(item_id: impl Into<String>, role_tag: RoleTag, messages: Vec<ChatMessage>) -> Self {
        Self {
            item_id: item_id.into(),
            role_tag,
            messages,
            sampling: SamplingParams::greedy(),
            want_logprobs: false,
            top_logprobs: 0,
        }
    }

    pub fn with_logprobs(mut self, top_k: u32) -> Self {
        self.want_logprobs = true;
        self.top_logprobs = top_k;
        self
    }

    pub fn with_sampling(mut self, sampling: SamplingParams) -> Self {
        self.sampling = sampling;
        self
    }
}

/// A single choice returned by a backend.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendChoice {
    pub text: String,
    pub logprobs: Option<Vec<TokenLogprob>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendResponse {
    pub choices: Vec<BackendChoice>,
    pub omitted_params: Vec<String>,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendError {
    /// Worth retrying: timeouts, connection failures, 429 and 5xx.
    Transient(String),
    Permanent(String),
}

pub trait Backend: Send + Sync {
    fn chat(&self, config: &EndpointConfig, request: &ChatRequest) -> Result<BackendResponse, BackendError>;

    /// Clock used for run identifiers; the mock pins it for reproducibility.
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Shareable handle pairing an endpoint configuration with its backend.
#[derive(Clone)]
pub struct Client {
    config: EndpointConfig,
    backend: Arc<dyn Backend>,
}

impl std::fmt::Debug for Client {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Client").field("config", &self.config).finish()
    }
}

impl Client {
    /// Builds the backend named by `config.base_url`.
    pub fn connect(config: EndpointConfig) -> Result<Self> {
        config.validate()?;
        let backend: Arc<dyn Backend> = match config.base_url.strip_prefix("mock:") {
            Some(path) => Arc::new(MockBackend::new(MockScript::load(path.as_ref())?)),
            None => Arc::new(HttpBackend::new(&config)?),
        };
        Ok(Self { config, backend })
    }

    pub fn with_backend(config: EndpointConfig, backend: Arc<dyn Backend>) -> Self {
        Self { config, backend }
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.backend.now()
    }

    /// Issues one request and returns its first choice.
    pub fn complete(&self, request: &ChatRequest) -> Result<GenerationTrace> {
        self.complete_n(request)?
            .into_iter()
            .next()
            .ok_or_else(|| self.transport("endpoint returned no choices".into()))
    }

    /// Issues one request and returns every choice (`sampling.n` of them).
    pub fn complete_n(&self, request: &ChatRequest) -> Result<Vec<GenerationTrace>> {
        if request.messages.is_empty() {
            return Err(Error::Contract("chat request has no messages".into()));
        }
        request.sampling.validate()?;

        let mut attempt = 0u32;
        let response = loop {
            match self.backend.chat(&self.config, request) {
                Ok(r) => break r,
                Err(BackendError::Transient(msg)) if attempt < self.config.max_retries => {
                    log::debug!(
                        "{} {}: transient failure ({msg}), retry {}",
                        request.item_id,
                        request.role_tag,
                        attempt + 1
                    );
                    std::thread::sleep(self.config.backoff(attempt));
                    attempt += 1;
                }
                Err(BackendError::Transient(msg)) => {
                    return Err(self.transport(format!(
                        "{msg} (gave up after {} retries)",
                        self.config.max_retries
                    )))
                }
                Err(BackendError::Permanent(msg)) => return Err(self.transport(msg)),
            }
        };

        let mut traces = Vec::with_capacity(response.choices.len());
        for choice in response.choices {
            let token_logprobs = match (choice.logprobs, request.want_logprobs) {
                (Some(lp), _) => lp,
                (None, false) => Vec::new(),
                (None, true) => {
                    return Err(Error::Capability(format!(
                        "{} returned no logprobs for {} {}",
                        self.config.base_url, request.item_id, request.role_tag
                    )))
                }
            };
            if request.want_logprobs && token_logprobs.is_empty() && !choice.text.is_empty() {
                return Err(Error::Capability(format!(
                    "{} returned empty logprobs for {} {}",
                    self.config.base_url, request.item_id, request.role_tag
                )));
            }
            traces.push(GenerationTrace {
                item_id: request.item_id.clone(),
                role_tag: request.role_tag,
                prompt_messages: request.messages.clone(),
                output_text: choice.text,
                token_logprobs,
                sampling: request.sampling.clone(),
                created_at: response.created_at,
                retries: attempt,
                omitted_params: response.omitted_params.clone(),
            });
        }
        Ok(traces)
    }

    /// Runs `requests` with at most `parallelism` in flight.
    ///
    /// Results come back in request order; a failing request leaves an error
    /// in its own slot and does not affect the others.
    pub fn complete_batch(
        &self,
        requests: &[ChatRequest],
        parallelism: usize,
    ) -> Vec<Result<Vec<GenerationTrace>>> {
        let parallelism = parallelism.clamp(1, self.config.max_parallel.max(1));
        run_bounded(requests, parallelism, |req| self.complete_n(req))
    }

    fn transport(&self, message: String) -> Error {
        Error::Transport {
            endpoint: self.config.base_url.clone(),
            message,
        }
    }
}

/// Order-preserving bounded-parallel map.
pub(crate) fn run_bounded<T, R, F>(inputs: &[T], parallelism: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    if inputs.is_empty() {
        return Vec::new();
    }
    let workers = parallelism.max(1).min(inputs.len());
    if workers == 1 {
        return inputs.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..inputs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        if i >= inputs.len() {
                            break;
                        }
                        done.push((i, f(&inputs[i])));
                    }
                    done
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("batch worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every slot filled"))
        .collect()
}
