//! Text embedding backends.
//!
//! [`HashEmbedder`] is the deterministic default: every token maps to a
//! pseudo-random Gaussian direction seeded from a stable hash of the token, and
//! a text embeds as the normalized sum of its token directions. Texts that
//! share tokens land close together; unrelated tokens are nearly orthogonal
//! (cosine noise has standard deviation about `1/sqrt(dim)`).

use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;
use thiserror::Error;

use crate::embedding_store::{normalize, Embedding, StoreError};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("text has no embeddable tokens")]
    EmptyText,
    #[error(transparent)]
    Vector(#[from] StoreError),
    #[error("embedding backend: {0}")]
    Backend(String),
}

pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Embedding, EmbedError>;
}

/// Function words dropped before hashing. They still count toward query
/// length wherever the raw text is measured.
const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "can", "do", "does", "for", "from", "has",
    "have", "he", "her", "his", "i", "in", "into", "is", "it", "its", "of", "on", "one", "or",
    "she", "some", "someone", "something", "that", "the", "their", "them", "there", "they",
    "this", "to", "was", "were", "with", "video", "shows", "seen", "clearly", "also", "frame",
    "appears", "visible",
];

/// Lowercased alphanumeric tokens, stopwords removed.
pub fn content_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect()
}

/// 64-bit FNV-1a. Stable across platforms and releases, unlike `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim, seed: 0 }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn token_direction(&self, token: &str, acc: &mut [f64]) {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()) ^ self.seed);
        for slot in acc.iter_mut() {
            let x: f64 = StandardNormal.sample(&mut rng);
            *slot += x;
        }
    }
}

impl TextEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        let tokens = content_tokens(text);
        if tokens.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut acc = vec![0.0; self.dim];
        for t in &tokens {
            self.token_direction(t, &mut acc);
        }
        Ok(normalize(&acc, self.dim)?)
    }
}

/// Client for an OpenAI-style `POST {base_url}/embeddings` endpoint.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    base_url: String,
    model: String,
    api_key: Option<String>,
    dim: usize,
    timeout: Duration,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl HttpEmbedder {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, dim: usize) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key: None,
            dim,
            timeout: Duration::from_secs(60),
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

impl TextEmbedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let url = format!("{}/embeddings", self.base_url.trim_end_matches('/'));
        let mut req = agent.post(&url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let body = serde_json::json!({ "model": self.model, "input": text });
        let resp: EmbeddingResponse = req
            .send_json(&body)
            .map_err(|e| EmbedError::Backend(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| EmbedError::Backend(e.to_string()))?;
        let raw = resp
            .data
            .into_iter()
            .next()
            .ok_or_else(|| EmbedError::Backend("response has no embedding".into()))?
            .embedding;
        Ok(normalize(&raw, self.dim)?)
    }
}
