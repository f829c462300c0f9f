//! Chat-completion gateway with record/replay transcripts.
//!
//! Every LLM call in the pipeline goes through [`Gateway::complete`]. In
//! live mode the request is forwarded to a provider (with retry and rate
//! limiting); in record mode the response is also appended to a
//! [`Transcript`]; in replay mode no provider exists at all and responses are
//! served from a transcript keyed by the request digest.

pub(crate) mod http;
mod mock;
mod transcript;

use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use http::HttpProvider;
pub(crate) use http::{agent as http_agent, post_json};
pub use mock::{MockProvider, ScriptRule};
pub use transcript::{Transcript, TranscriptEntry};

pub const ENV_PROVIDER: &str = "SKBF_LLM_PROVIDER";
pub const ENV_API_KEY: &str = "SKBF_LLM_API_KEY";
pub const ENV_MODEL: &str = "SKBF_LLM_MODEL";
pub const ENV_BASE_URL: &str = "SKBF_LLM_BASE_URL";
pub const ENV_SCRIPT: &str = "SKBF_LLM_SCRIPT";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    /// Network or server-side failure; retried by the gateway.
    #[error("transport failure: {0}")]
    Transport(String),
    /// The provider refused the request; not retried.
    #[error("request rejected: {0}")]
    Rejected(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("gave up after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("provider rejected request: {0}")]
    Rejected(String),
    #[error("no recorded response for request digest {digest}")]
    ReplayMiss { digest: String },
    #[error("transcript: {0}")]
    Transcript(String),
    #[error("provider configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Free-form label such as `extraction` or `rerank`; not part of the digest.
    pub tag: String,
}

impl ChatRequest {
    pub fn new(tag: impl Into<String>, system: impl Into<String>, user: impl Into<String>) -> Self {
        ChatRequest {
            system: system.into(),
            user: user.into(),
            temperature: 0.0,
            max_tokens: 512,
            tag: tag.into(),
        }
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    /// Hex SHA-256 over the prompt texts and temperature.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"chat-request v1\n");
        h.update(self.temperature.to_bits().to_le_bytes());
        h.update((self.system.len() as u64).to_le_bytes());
        h.update(self.system.as_bytes());
        h.update((self.user.len() as u64).to_le_bytes());
        h.update(self.user.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.user.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("user text is empty".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest(
                "max_tokens must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub trait LlmProvider: Send + Sync {
    fn name(&self) -> &str;
    fn chat(&self, req: &ChatRequest) -> Result<String, ProviderError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    /// Delay before the first retry; doubles on each further retry.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 2,
            base_delay: Duration::from_millis(250),
        }
    }
}

impl RetryPolicy {
    pub fn no_delay() -> Self {
        RetryPolicy {
            base_delay: Duration::ZERO,
            ..Self::default()
        }
    }

    fn delay_before_retry(&self, retry: u32) -> Duration {
        self.base_delay.saturating_mul(1 << retry.min(16))
    }
}

/// Token bucket limiting requests per minute. Callers block until a token is free.
#[derive(Debug)]
pub struct RateLimiter {
    capacity: f64,
    per_second: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn per_minute(requests: u32) -> Self {
        let capacity = f64::from(requests.max(1));
        RateLimiter {
            capacity,
            per_second: capacity / 60.0,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock().expect("rate limiter poisoned");
                let now = Instant::now();
                let refill = now.duration_since(state.1).as_secs_f64() * self.per_second;
                state.0 = (state.0 + refill).min(self.capacity);
                state.1 = now;
                if state.0 >= 1.0 {
                    state.0 -= 1.0;
                    return;
                }
                (1.0 - state.0) / self.per_second
            };
            thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatewayMode {
    Live,
    Record,
    Replay,
}

pub struct Gateway {
    provider: Option<Arc<dyn LlmProvider>>,
    mode: GatewayMode,
    transcript: Mutex<Transcript>,
    retry: RetryPolicy,
    limiter: Option<RateLimiter>,
}

impl Gateway {
    pub fn live(provider: Arc<dyn LlmProvider>) -> Self {
        Self::with_provider(provider, GatewayMode::Live)
    }

    pub fn recording(provider: Arc<dyn LlmProvider>) -> Self {
        Self::with_provider(provider, GatewayMode::Record)
    }

    /// A gateway that never touches a provider.
    pub fn replay(transcript: Transcript) -> Self {
        Gateway {
            provider: None,
            mode: GatewayMode::Replay,
            transcript: Mutex::new(transcript),
            retry: RetryPolicy::default(),
            limiter: None,
        }
    }

    fn with_provider(provider: Arc<dyn LlmProvider>, mode: GatewayMode) -> Self {
        Gateway {
            provider: Some(provider),
            mode,
            transcript: Mutex::new(Transcript::default()),
            retry: RetryPolicy::default(),
            limiter: None,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_rate_limit(mut self, requests_per_minute: u32) -> Self {
        self.limiter = Some(RateLimiter::per_minute(requests_per_minute));
        self
    }

    pub fn mode(&self) -> GatewayMode {
        self.mode
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        req.validate()?;
        let digest = req.digest();
        let provider = match (&self.provider, self.mode) {
            (Some(p), GatewayMode::Live | GatewayMode::Record) => p,
            _ => {
                let transcript = self.transcript.lock().expect("transcript poisoned");
                return transcript
                    .get(&digest)
                    .map(|e| e.response.clone())
                    .ok_or(GatewayError::ReplayMiss { digest });
            }
        };

        let started = Instant::now();
        let mut attempt = 0;
        let response = loop {
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            match provider.chat(req) {
                Ok(text) => break text,
                Err(ProviderError::Rejected(msg)) => return Err(GatewayError::Rejected(msg)),
                Err(ProviderError::Transport(msg)) => {
                    if attempt >= self.retry.max_retries {
                        return Err(GatewayError::Transport {
                            attempts: attempt + 1,
                            message: msg,
                        });
                    }
                    log::warn!("{} request failed ({msg}); retrying", provider.name());
                    thread::sleep(self.retry.delay_before_retry(attempt));
                    attempt += 1;
                }
            }
        };

        if self.mode == GatewayMode::Record {
            self.transcript
                .lock()
                .expect("transcript poisoned")
                .push(TranscriptEntry {
                    digest,
                    response: response.clone(),
                    latency_ms: started.elapsed().as_millis() as u64,
                });
        }
        Ok(response)
    }

    /// Snapshot of the transcript (recorded entries, or the replay source).
    pub fn transcript(&self) -> Transcript {
        self.transcript.lock().expect("transcript poisoned").clone()
    }
}

/// Build a provider from `SKBF_LLM_*` variables looked up through `var`.
///
/// `SKBF_LLM_PROVIDER` selects `http` (generic chat-completion endpoint at
/// `SKBF_LLM_BASE_URL`, default OpenAI) or `scripted` (rules file at
/// `SKBF_LLM_SCRIPT`).
pub fn provider_from_vars(
    var: impl Fn(&str) -> Option<String>,
) -> Result<Arc<dyn LlmProvider>, GatewayError> {
    let kind = var(ENV_PROVIDER).unwrap_or_else(|| "http".into());
    match kind.as_str() {
        "http" | "openai" => {
            let base = var(ENV_BASE_URL).unwrap_or_else(|| http::DEFAULT_BASE_URL.into());
            let model = var(ENV_MODEL).unwrap_or_else(|| http::DEFAULT_MODEL.into());
            Ok(Arc::new(HttpProvider::new(base, var(ENV_API_KEY), model)))
        }
        "scripted" | "mock" => {
            let path = var(ENV_SCRIPT)
                .ok_or_else(|| GatewayError::Config(format!("{ENV_SCRIPT} is not set")))?;
            Ok(Arc::new(MockProvider::from_script_file(path)?))
        }
        other => Err(GatewayError::Config(format!("unknown provider `{other}`"))),
    }
}

pub fn provider_from_env() -> Result<Arc<dyn LlmProvider>, GatewayError> {
    provider_from_vars(|k| std::env::var(k).ok())
}
