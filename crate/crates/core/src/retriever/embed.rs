use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::EmbeddingVector;
use crate::llm::ProviderError;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("provider returned {found} values, expected {expected}")]
    WrongDim { expected: usize, found: usize },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Text to fixed-dimension vector.
pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic bag-of-words feature hashing (words and word bigrams).
/// Counts are non-negative, so any non-empty text maps to a non-zero vector.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
    name: String,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        Self {
            dim,
            name: format!("hashing-{dim}"),
        }
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(512)
    }
}

impl Embedder for HashingEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let text = text.trim();
        if text.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let lower = text.to_lowercase();
        let words: Vec<&str> = lower
            .split(|c: char| !(c.is_alphanumeric() || c == '_'))
            .filter(|w| !w.is_empty())
            .collect();
        let mut values = vec![0.0; self.dim];
        let mut bump = |feature: &[u8]| values[(fnv1a(feature) % self.dim as u64) as usize] += 1.0;
        if words.is_empty() {
            for ch in lower.chars().filter(|c| !c.is_whitespace()) {
                bump(ch.to_string().as_bytes());
            }
        } else {
            for w in &words {
                bump(w.as_bytes());
            }
            for pair in words.windows(2) {
                bump(format!("{} {}", pair[0], pair[1]).as_bytes());
            }
        }
        Ok(EmbeddingVector::new(values))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpEmbedderConfig {
    pub name: String,
    pub url: String,
    pub dim: usize,
    #[serde(default)]
    pub bearer_token: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    30_000
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    values: Vec<f64>,
}

/// Remote embedding endpoint: `{text}` in, `{values}` out.
pub struct HttpEmbedder {
    cfg: HttpEmbedderConfig,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(cfg: HttpEmbedderConfig) -> Result<Self, EmbedError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(Self { cfg, client })
    }
}

impl Embedder for HttpEmbedder {
    fn name(&self) -> &str {
        &self.cfg.name
    }

    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let resp: EmbedResponse = crate::llm::post_json(
            &self.client,
            &self.cfg.url,
            self.cfg.bearer_token.as_deref(),
            &EmbedRequest { text },
        )?;
        if resp.values.len() != self.cfg.dim {
            return Err(EmbedError::WrongDim {
                expected: self.cfg.dim,
                found: resp.values.len(),
            });
        }
        Ok(EmbeddingVector::new(resp.values))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_nonzero() {
        let e = HashingEmbedder::new(64);
        let a = e.embed("Filter the collection by date").unwrap();
        assert_eq!(a, e.embed("Filter the collection by date").unwrap());
        assert_eq!(a.dim(), 64);
        assert!(e.embed("!!!").unwrap().values.iter().any(|x| *x > 0.0));
        assert!(e.embed("   ").is_err());
        assert_ne!(a, e.embed("date by collection the filter extra").unwrap());
    }
}
