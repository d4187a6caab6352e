//! Provider-agnostic text generation and the prompt templates.

mod http;
pub(crate) use http::post_json;
mod prompts;
mod scripted;

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::AgentConfig;

pub use http::{HttpProvider, HttpProviderConfig};
pub use prompts::{
    generate_instruction, parse_prompt_reply, render_prompt, InstructionSummary, PromptError,
    PromptTemplate, TemplateName,
};
pub use scripted::{ScriptEntry, ScriptError, ScriptedCandidate, ScriptedProvider};

/// Wire request sent to a provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompletionRequest {
    pub prompt: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub n: usize,
    pub want_logprobs: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderCandidate {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub candidates: Vec<ProviderCandidate>,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProviderError {
    #[error("provider timed out")]
    Timeout,
    #[error("provider refused the request: {0}")]
    Refused(String),
    #[error("transport failure: {0}")]
    Transport(String),
}

impl ProviderError {
    pub fn retryable(&self) -> bool {
        !matches!(self, ProviderError::Refused(_))
    }
}

pub trait LlmProvider: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl From<&AgentConfig> for SamplingParams {
    fn from(cfg: &AgentConfig) -> Self {
        Self {
            temperature: cfg.temperature,
            top_p: cfg.top_p,
            max_tokens: cfg.max_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub token_logprobs: Vec<f64>,
    pub seq_prior: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum GatewayError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("sample count must be positive")]
    ZeroSamples,
    #[error("prompt needs ~{tokens} tokens but the context window is {limit}")]
    ContextOverflow { tokens: usize, limit: usize },
    #[error("provider `{provider}` failed after {attempts} attempt(s): {source}")]
    Provider {
        provider: String,
        attempts: u32,
        source: ProviderError,
    },
}

/// Tokenizer-free length estimate: four bytes per token, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}

/// Length-normalized sequence probability, or the rank fallback when the
/// provider gave no log-probabilities.
pub fn seq_prior(token_logprobs: &[f64], rank: usize) -> f64 {
    let finite: Vec<f64> = token_logprobs.iter().copied().filter(|x| x.is_finite()).collect();
    if finite.is_empty() {
        return 1.0 / (rank as f64 + 1.0);
    }
    let mean = finite.iter().sum::<f64>() / finite.len() as f64;
    // logprobs are ≤ 0 in theory; clamp keeps p in (0, 1] for sloppy providers
    mean.min(0.0).exp().max(f64::MIN_POSITIVE)
}

#[derive(Clone)]
pub struct LlmGateway {
    provider: Arc<dyn LlmProvider>,
    context_window_tokens: usize,
    max_retries: u32,
    backoff: Duration,
}

impl std::fmt::Debug for LlmGateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmGateway")
            .field("provider", &self.provider.name())
            .field("context_window_tokens", &self.context_window_tokens)
            .field("max_retries", &self.max_retries)
            .finish()
    }
}

impl LlmGateway {
    pub fn new(provider: Arc<dyn LlmProvider>, context_window_tokens: usize) -> Self {
        Self {
            provider,
            context_window_tokens,
            max_retries: 2,
            backoff: Duration::from_millis(250),
        }
    }

    pub fn with_retries(mut self, max_retries: u32, backoff: Duration) -> Self {
        self.max_retries = max_retries;
        self.backoff = backoff;
        self
    }

    pub fn provider_name(&self) -> &str {
        self.provider.name()
    }

    pub fn context_window_tokens(&self) -> usize {
        self.context_window_tokens
    }

    /// Samples up to `n` non-empty candidates, in provider order.
    pub fn complete(
        &self,
        prompt: &str,
        params: SamplingParams,
        n: usize,
    ) -> Result<Vec<Candidate>, GatewayError> {
        if prompt.trim().is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        if n == 0 {
            return Err(GatewayError::ZeroSamples);
        }
        let tokens = estimate_tokens(prompt);
        if tokens > self.context_window_tokens {
            return Err(GatewayError::ContextOverflow {
                tokens,
                limit: self.context_window_tokens,
            });
        }
        let request = CompletionRequest {
            prompt: prompt.to_string(),
            temperature: params.temperature,
            top_p: params.top_p,
            max_tokens: params.max_tokens,
            n,
            want_logprobs: true,
        };
        let mut attempts = 0;
        let response = loop {
            attempts += 1;
            match self.provider.complete(&request) {
                Ok(r) => break r,
                Err(e) if e.retryable() && attempts <= self.max_retries => {
                    tracing::warn!(provider = self.provider.name(), attempts, error = %e, "retrying completion");
                    std::thread::sleep(self.backoff * attempts);
                }
                Err(source) => {
                    return Err(GatewayError::Provider {
                        provider: self.provider.name().to_string(),
                        attempts,
                        source,
                    })
                }
            }
        };
        Ok(response
            .candidates
            .into_iter()
            .filter(|c| !c.text.trim().is_empty())
            .take(n)
            .enumerate()
            .map(|(rank, c)| {
                let logprobs = c.token_logprobs.unwrap_or_default();
                Candidate {
                    seq_prior: seq_prior(&logprobs, rank),
                    token_logprobs: logprobs,
                    text: c.text,
                }
            })
            .collect())
    }
}

/// Caps the number of in-flight requests to the wrapped provider.
pub struct ConcurrencyLimited<P> {
    inner: P,
    limit: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl<P: LlmProvider> ConcurrencyLimited<P> {
    pub fn new(inner: P, limit: usize) -> Self {
        Self {
            inner,
            limit: limit.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }
}

impl<P: LlmProvider> LlmProvider for ConcurrencyLimited<P> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        {
            let mut n = self.in_flight.lock().unwrap();
            while *n >= self.limit {
                n = self.freed.wait(n).unwrap();
            }
            *n += 1;
        }
        let result = self.inner.complete(request);
        *self.in_flight.lock().unwrap() -= 1;
        self.freed.notify_one();
        result
    }
}
