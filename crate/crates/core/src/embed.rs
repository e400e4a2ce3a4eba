//! Embedding providers for text and image inputs.
//!
//! Two providers implement [`Embedder`]:
//!
//! - [`DeterministicEmbedder`]: hashes the input with a stable 64-bit hash,
//!   uses the hash to seed a standard-Gaussian draw of length `dim`, and
//!   L2-normalizes. Identical `(seed, dim, input)` always gives the identical
//!   vector, so every test downstream runs without a model.
//! - [`RemoteEmbedder`]: POSTs `{"model": .., "input": [..]}` to an
//!   embeddings endpoint and reads `data[0].embedding` from the response.
//!   Images are sent as base64 data-URLs.
//!
//! All vectors leaving a provider are unit-norm.

use std::sync::Arc;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http::{self, Attempt, InflightLimiter, RetryPolicy, Telemetry};

pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_API_KEY_ENV: &str = "MIRAG_API_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("empty input")]
    EmptyInput,
    #[error("cannot normalize an all-zero vector")]
    ZeroVector,
    #[error("invalid provider config: {0}")]
    InvalidConfig(String),
    #[error("remote embedding service returned {status}: {body}")]
    Remote { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed embedding response: {0}")]
    Malformed(String),
    #[error("expected dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

impl EmbedError {
    /// True for remote failures that a later attempt may fix (429, 5xx, transport).
    pub fn is_retryable(&self) -> bool {
        match self {
            EmbedError::Remote { status, .. } => http::is_retryable_status(*status),
            EmbedError::Transport(_) => true,
            _ => false,
        }
    }
}

/// A dense embedding. Components are kept in `f64`; indexes store `f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    /// `(self ‖ other)`.
    pub fn concat(&self, other: &EmbeddingVector) -> EmbeddingVector {
        let mut v = Vec::with_capacity(self.dim() + other.dim());
        v.extend_from_slice(&self.0);
        v.extend_from_slice(&other.0);
        EmbeddingVector(v)
    }
}

pub fn l2_normalize(v: &EmbeddingVector) -> Result<EmbeddingVector, EmbedError> {
    let norm = v.norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(EmbedError::ZeroVector);
    }
    Ok(EmbeddingVector(v.0.iter().map(|x| x / norm).collect()))
}

/// A source of unit-norm text and image embeddings.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// Identifies the embedding space; KB bundles record it so queries are
    /// never scored against vectors from a different model or seed.
    fn fingerprint(&self) -> String;

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;

    fn embed_image(&self, image_bytes: &[u8]) -> Result<EmbeddingVector, EmbedError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    DeterministicReference,
    RemoteHttp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_inflight")]
    pub max_inflight: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_dim() -> usize {
    DEFAULT_DIM
}
fn default_api_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}
fn default_inflight() -> usize {
    8
}
fn default_timeout() -> u64 {
    60
}

impl ProviderConfig {
    pub fn deterministic(seed: u64, dim: usize) -> Self {
        Self {
            kind: ProviderKind::DeterministicReference,
            dim,
            endpoint: None,
            model: None,
            seed: Some(seed),
            api_key_env: default_api_key_env(),
            retry: RetryPolicy::default(),
            max_inflight: default_inflight(),
            timeout_secs: default_timeout(),
        }
    }

    pub fn remote(endpoint: impl Into<String>, model: impl Into<String>, dim: usize) -> Self {
        Self {
            kind: ProviderKind::RemoteHttp,
            endpoint: Some(endpoint.into()),
            model: Some(model.into()),
            seed: None,
            ..Self::deterministic(0, dim)
        }
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dim == 0 {
            return Err(EmbedError::InvalidConfig("dim must be positive".into()));
        }
        match self.kind {
            ProviderKind::DeterministicReference if self.seed.is_none() => Err(
                EmbedError::InvalidConfig("deterministic-reference requires seed".into()),
            ),
            ProviderKind::RemoteHttp if self.endpoint.is_none() => Err(EmbedError::InvalidConfig(
                "remote-http requires endpoint".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn fingerprint(&self) -> String {
        match self.kind {
            ProviderKind::DeterministicReference => format!(
                "deterministic-reference;dim={};seed={}",
                self.dim,
                self.seed.unwrap_or_default()
            ),
            ProviderKind::RemoteHttp => format!(
                "remote-http;dim={};model={}",
                self.dim,
                self.model.as_deref().unwrap_or("")
            ),
        }
    }

    pub fn build(&self) -> Result<Arc<dyn Embedder>, EmbedError> {
        self.validate()?;
        Ok(match self.kind {
            ProviderKind::DeterministicReference => Arc::new(DeterministicEmbedder::new(
                self.seed.unwrap_or_default(),
                self.dim,
            )),
            ProviderKind::RemoteHttp => Arc::new(RemoteEmbedder::new(self.clone())?),
        })
    }
}

/// FNV-1a, 64-bit. Stable across platforms and releases, unlike `DefaultHasher`.
pub fn fnv1a64(chunks: &[&[u8]]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for chunk in chunks {
        for &b in *chunk {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    }
    h
}

const TEXT_TAG: &[u8] = b"text\0";
const IMAGE_TAG: &[u8] = b"image\0";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeterministicEmbedder {
    seed: u64,
    dim: usize,
}

impl DeterministicEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self { seed, dim }
    }

    fn draw(&self, tag: &[u8], payload: &[u8]) -> Result<EmbeddingVector, EmbedError> {
        let h = fnv1a64(&[&self.seed.to_le_bytes(), tag, payload]);
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let raw: Vec<f64> = (0..self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        l2_normalize(&EmbeddingVector(raw))
    }
}

impl Embedder for DeterministicEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        ProviderConfig::deterministic(self.seed, self.dim).fingerprint()
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyInput);
        }
        self.draw(TEXT_TAG, text.as_bytes())
    }

    fn embed_image(&self, image_bytes: &[u8]) -> Result<EmbeddingVector, EmbedError> {
        if image_bytes.is_empty() {
            return Err(EmbedError::EmptyInput);
        }
        self.draw(IMAGE_TAG, image_bytes)
    }
}

/// Client for an OpenAI-style `/embeddings` endpoint.
pub struct RemoteEmbedder {
    cfg: ProviderConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    limiter: InflightLimiter,
    telemetry: Telemetry,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl RemoteEmbedder {
    pub fn new(cfg: ProviderConfig) -> Result<Self, EmbedError> {
        cfg.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| EmbedError::Transport(e.to_string()))?;
        let api_key = std::env::var(&cfg.api_key_env).ok();
        Ok(Self {
            limiter: InflightLimiter::new(cfg.max_inflight),
            client,
            api_key,
            telemetry: Telemetry::default(),
            cfg,
        })
    }

    pub fn telemetry(&self) -> &Telemetry {
        &self.telemetry
    }

    fn request(&self, input: String) -> Result<EmbeddingVector, EmbedError> {
        let endpoint = self.cfg.endpoint.as_deref().unwrap_or_default();
        let body = serde_json::json!({
            "model": self.cfg.model.as_deref().unwrap_or(""),
            "input": [input],
        });
        let _permit = self.limiter.acquire();
        let outcome = http::with_retries(&self.cfg.retry, &self.telemetry, || {
            let mut req = self.client.post(endpoint).json(&body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let resp = match req.send() {
                Ok(r) => r,
                Err(e) => return Ok(Attempt::Retry(0, e.to_string())),
            };
            let status = resp.status().as_u16();
            let text = resp
                .text()
                .map_err(|e| EmbedError::Transport(e.to_string()))?;
            if (200..300).contains(&status) {
                Ok(Attempt::Done(text))
            } else if http::is_retryable_status(status) {
                Ok(Attempt::Retry(status, text))
            } else {
                Err(EmbedError::Remote { status, body: text })
            }
        })?;
        let text = match outcome {
            Ok(t) => t,
            Err((0, msg)) => return Err(EmbedError::Transport(msg)),
            Err((status, body)) => return Err(EmbedError::Remote { status, body }),
        };
        let parsed: EmbeddingResponse =
            serde_json::from_str(&text).map_err(|e| EmbedError::Malformed(e.to_string()))?;
        let values = parsed
            .data
            .into_iter()
            .next()
            .ok_or_else(|| EmbedError::Malformed("empty data array".into()))?
            .embedding;
        if values.len() != self.cfg.dim {
            return Err(EmbedError::DimensionMismatch {
                expected: self.cfg.dim,
                got: values.len(),
            });
        }
        l2_normalize(&EmbeddingVector(values))
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn fingerprint(&self) -> String {
        self.cfg.fingerprint()
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyInput);
        }
        self.request(text.to_string())
    }

    fn embed_image(&self, image_bytes: &[u8]) -> Result<EmbeddingVector, EmbedError> {
        if image_bytes.is_empty() {
            return Err(EmbedError::EmptyInput);
        }
        self.request(http::data_url(image_bytes))
    }
}
