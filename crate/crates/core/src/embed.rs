//! Pluggable text and code embeddings plus similarity utilities.
//!
//! The offline embedders hash character trigrams (text) or token bigrams
//! (code) into a fixed 256-dimensional count vector and L2-normalize it.
//! They need no network and are fully deterministic, which makes them the
//! default for tests and reproducible pipeline runs; a live sentence or
//! code encoder can be registered under its own `provider_tag` without
//! touching any caller.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::hash::{fnv1a, fnv1a_parts, sha256_hex};
use crate::{Error, Result};

pub const OFFLINE_DIMENSION: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub provider_tag: String,
}

impl EmbeddingVector {
    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    fn check_finite(&self) -> Result<()> {
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "embedding from {} contains non-finite entries",
                self.provider_tag
            )));
        }
        Ok(())
    }
}

/// An embedding provider. Implementations must be deterministic for a
/// fixed input and safe to call from multiple threads.
pub trait Embedder: Send + Sync {
    fn provider_tag(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed(&self, content: &str) -> Result<EmbeddingVector>;
}

fn normalized(mut values: Vec<f64>, provider_tag: &str) -> EmbeddingVector {
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut values {
            *v /= norm;
        }
    }
    EmbeddingVector {
        values,
        provider_tag: provider_tag.to_string(),
    }
}

/// Hashed character-trigram embedder for natural-language text.
#[derive(Debug, Default)]
pub struct OfflineTextEmbedder;

impl Embedder for OfflineTextEmbedder {
    fn provider_tag(&self) -> &str {
        "offline-char-trigram-v1"
    }

    fn dimension(&self) -> usize {
        OFFLINE_DIMENSION
    }

    fn embed(&self, content: &str) -> Result<EmbeddingVector> {
        if content.is_empty() {
            return Err(Error::domain("cannot embed empty text"));
        }
        let chars: Vec<char> = content.to_lowercase().chars().collect();
        let mut counts = vec![0.0; OFFLINE_DIMENSION];
        if chars.len() < 3 {
            let s: String = chars.iter().collect();
            counts[(fnv1a(s.as_bytes()) % OFFLINE_DIMENSION as u64) as usize] += 1.0;
        } else {
            for window in chars.windows(3) {
                let gram: String = window.iter().collect();
                counts[(fnv1a(gram.as_bytes()) % OFFLINE_DIMENSION as u64) as usize] += 1.0;
            }
        }
        Ok(normalized(counts, self.provider_tag()))
    }
}

/// Split code into word tokens and single-character symbol tokens,
/// discarding whitespace entirely.
pub fn code_tokens(code: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in code.chars() {
        if c.is_alphanumeric() || c == '_' {
            word.push(c);
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                tokens.push(c.to_string());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Hashed token-bigram embedder for source code. Whitespace never reaches
/// the hash, so formatting-only edits embed identically.
#[derive(Debug, Default)]
pub struct OfflineCodeEmbedder;

impl Embedder for OfflineCodeEmbedder {
    fn provider_tag(&self) -> &str {
        "offline-token-bigram-v1"
    }

    fn dimension(&self) -> usize {
        OFFLINE_DIMENSION
    }

    fn embed(&self, content: &str) -> Result<EmbeddingVector> {
        if content.is_empty() {
            return Err(Error::domain("cannot embed empty code"));
        }
        let tokens = code_tokens(content);
        if tokens.is_empty() {
            return Err(Error::domain("code contains no tokens"));
        }
        let mut counts = vec![0.0; OFFLINE_DIMENSION];
        if tokens.len() == 1 {
            counts[(fnv1a(tokens[0].as_bytes()) % OFFLINE_DIMENSION as u64) as usize] += 1.0;
        } else {
            for pair in tokens.windows(2) {
                let h = fnv1a_parts(&[pair[0].as_bytes(), pair[1].as_bytes()]);
                counts[(h % OFFLINE_DIMENSION as u64) as usize] += 1.0;
            }
        }
        Ok(normalized(counts, self.provider_tag()))
    }
}

/// Cosine similarity between two vectors of equal dimension.
pub fn cosine_similarity(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    if u.dimension() != v.dimension() {
        return Err(Error::domain(format!(
            "dimension mismatch: {} vs {}",
            u.dimension(),
            v.dimension()
        )));
    }
    u.check_finite()?;
    v.check_finite()?;
    let dot: f64 = u.values.iter().zip(&v.values).map(|(a, b)| a * b).sum();
    let nu = u.values.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.values.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::domain("cosine similarity undefined for zero vector"));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Memoizing wrapper keyed by (provider_tag, content digest).
pub struct CachingEmbedder<E> {
    inner: E,
    cache: Mutex<HashMap<String, EmbeddingVector>>,
}

impl<E: Embedder> CachingEmbedder<E> {
    pub fn new(inner: E) -> Self {
        CachingEmbedder {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn into_inner(self) -> E {
        self.inner
    }
}

impl<E: Embedder> Embedder for CachingEmbedder<E> {
    fn provider_tag(&self) -> &str {
        self.inner.provider_tag()
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed(&self, content: &str) -> Result<EmbeddingVector> {
        let key = format!(
            "{}:{}",
            self.inner.provider_tag(),
            sha256_hex(content.as_bytes())
        );
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let vector = self.inner.embed(content)?;
        self.cache
            .lock()
            .unwrap()
            .insert(key, vector.clone());
        Ok(vector)
    }
}
