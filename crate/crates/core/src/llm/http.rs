use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{CompletionRequest, CompletionResponse, LlmProvider, ProviderError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpProviderConfig {
    pub name: String,
    /// Endpoint accepting the completion request body as JSON.
    pub url: String,
    #[serde(default)]
    pub bearer_token: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    120_000
}

/// Speaks the completion wire contract over HTTP POST.
pub struct HttpProvider {
    cfg: HttpProviderConfig,
    client: reqwest::blocking::Client,
}

impl HttpProvider {
    pub fn new(cfg: HttpProviderConfig) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(Self { cfg, client })
    }
}

pub(crate) fn post_json<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
    client: &reqwest::blocking::Client,
    url: &str,
    bearer: Option<&str>,
    body: &Req,
) -> Result<Resp, ProviderError> {
    let mut req = client.post(url).json(body);
    if let Some(token) = bearer {
        req = req.bearer_auth(token);
    }
    let resp = req.send().map_err(|e| {
        if e.is_timeout() {
            ProviderError::Timeout
        } else {
            ProviderError::Transport(e.to_string())
        }
    })?;
    let status = resp.status();
    if status.as_u16() == 429 || status.is_server_error() {
        return Err(ProviderError::Transport(format!("HTTP {status}")));
    }
    if !status.is_success() {
        let text = resp.text().unwrap_or_default();
        return Err(ProviderError::Refused(format!("HTTP {status}: {}", text.trim())));
    }
    resp.json::<Resp>()
        .map_err(|e| ProviderError::Transport(format!("bad response body: {e}")))
}

impl LlmProvider for HttpProvider {
    fn name(&self) -> &str {
        &self.cfg.name
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        post_json(
            &self.client,
            &self.cfg.url,
            self.cfg.bearer_token.as_deref(),
            request,
        )
    }
}
