//! External-service interfaces and their deterministic fixture-backed mocks.

use std::collections::BTreeMap;
use std::path::Path;
use std::thread;
use std::time::Duration;

use sha2::{Digest, Sha256};

use crate::error::FoundryError;
use crate::foundry::prompts::{fallback_reply, Step};
use crate::rng::sha256_hex;
use crate::sample::PerceptionReport;

/// Width of the mock embedding.
pub const EMBEDDING_DIM: usize = 256;

pub trait PerceptionClient: Send + Sync {
    fn perceive(&self, image_ref: &str) -> Result<PerceptionReport, FoundryError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub step: Step,
    pub prompt: String,
    pub temperature: f64,
}

pub trait ChatClient: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<String, FoundryError>;
}

pub trait EmbeddingClient: Send + Sync {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, FoundryError>;
    fn embed_image(&self, image_ref: &str) -> Result<Vec<f64>, FoundryError>;
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, FoundryError> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Perception reports looked up by image reference.
#[derive(Debug, Clone, Default)]
pub struct FixturePerception {
    pub reports: BTreeMap<String, PerceptionReport>,
}

impl FixturePerception {
    pub fn from_file(path: &Path) -> Result<Self, FoundryError> {
        Ok(Self {
            reports: read_json(path)?,
        })
    }
}

impl PerceptionClient for FixturePerception {
    fn perceive(&self, image_ref: &str) -> Result<PerceptionReport, FoundryError> {
        self.reports
            .get(image_ref)
            .cloned()
            .ok_or_else(|| FoundryError::Contract(format!("no perception fixture for {image_ref:?}")))
    }
}

/// Replies keyed by the hex sha256 of the prompt; unknown prompts get the
/// step's templated fallback.
#[derive(Debug, Clone, Default)]
pub struct FixtureChat {
    pub replies: BTreeMap<String, String>,
}

impl FixtureChat {
    pub fn from_file(path: &Path) -> Result<Self, FoundryError> {
        Ok(Self {
            replies: read_json(path)?,
        })
    }
}

impl ChatClient for FixtureChat {
    fn chat(&self, request: &ChatRequest) -> Result<String, FoundryError> {
        match self.replies.get(&sha256_hex(&request.prompt)) {
            Some(r) => Ok(r.clone()),
            None => Ok(fallback_reply(request.step, &request.prompt)),
        }
    }
}

/// Lowercased alphanumeric words of `text`.
pub fn embedding_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Signed feature hashing of a bag of tokens, L2-normalized.
pub fn hash_embedding<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Vec<f64> {
    let mut v = vec![0.0; EMBEDDING_DIM];
    for t in tokens {
        let d = Sha256::digest(t.as_bytes());
        let idx = u32::from_le_bytes([d[0], d[1], d[2], d[3]]) as usize % EMBEDDING_DIM;
        v[idx] += if d[4] & 1 == 0 { 1.0 } else { -1.0 };
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        // empty input: a fixed unit vector keeps the norm contract
        v[0] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Deterministic bag-of-words embedder. Images embed through an optional
/// caption map (image_ref -> text); otherwise through their reference.
#[derive(Debug, Clone, Default)]
pub struct HashingEmbedder {
    pub image_text: BTreeMap<String, String>,
}

impl EmbeddingClient for HashingEmbedder {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, FoundryError> {
        let toks = embedding_tokens(text);
        Ok(hash_embedding(toks.iter().map(String::as_str)))
    }

    fn embed_image(&self, image_ref: &str) -> Result<Vec<f64>, FoundryError> {
        match self.image_text.get(image_ref) {
            Some(t) => self.embed_text(t),
            None => self.embed_text(image_ref),
        }
    }
}

/// Explicit vectors for both texts and images; normalized on lookup.
#[derive(Debug, Clone, Default, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureEmbedder {
    pub texts: BTreeMap<String, Vec<f64>>,
    pub images: BTreeMap<String, Vec<f64>>,
}

impl FixtureEmbedder {
    /// Reads `{"texts": {..}, "images": {..}}`.
    pub fn from_file(path: &Path) -> Result<Self, FoundryError> {
        read_json(path)
    }
}

fn unit(v: &[f64], what: &str) -> Result<Vec<f64>, FoundryError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(FoundryError::Contract(format!("embedding for {what:?} has no direction")));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

impl EmbeddingClient for FixtureEmbedder {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, FoundryError> {
        let v = self
            .texts
            .get(text)
            .ok_or_else(|| FoundryError::Contract(format!("no embedding fixture for text {text:?}")))?;
        unit(v, text)
    }

    fn embed_image(&self, image_ref: &str) -> Result<Vec<f64>, FoundryError> {
        let v = self
            .images
            .get(image_ref)
            .ok_or_else(|| FoundryError::Contract(format!("no embedding fixture for image {image_ref:?}")))?;
        unit(v, image_ref)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Bounded retry with exponential backoff, for transport errors only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: usize,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    pub fn run<T>(&self, mut call: impl FnMut() -> Result<T, FoundryError>) -> Result<T, FoundryError> {
        let mut backoff = self.initial_backoff;
        let mut attempt = 1;
        loop {
            match call() {
                Err(FoundryError::Transport { message, .. }) if attempt < self.attempts => {
                    log::warn!("transport error (attempt {attempt}/{}): {message}", self.attempts);
                    thread::sleep(backoff);
                    backoff *= 2;
                    attempt += 1;
                }
                Err(FoundryError::Transport { message, .. }) => {
                    return Err(FoundryError::Transport {
                        attempts: attempt,
                        message,
                    })
                }
                other => return other,
            }
        }
    }
}
