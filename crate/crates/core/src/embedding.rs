//! Sentence embeddings: mean pooling, normalization, cosine similarity and
//! the provider abstraction.
//!
//! Two providers ship: [`HashEmbedder`], a deterministic offline stand-in,
//! and [`RemoteEmbedder`], which talks to an OpenAI-compatible
//! `/v1/embeddings` endpoint.

use std::ops::Deref;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_HASH_DIMENSION: usize = 256;
pub const MIN_HASH_DIMENSION: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("cannot pool an empty list of vectors")]
    EmptyPool,
    #[error("ragged input: vector {index} has length {found}, expected {expected}")]
    Ragged {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("zero vector cannot be normalized")]
    ZeroVector,
    #[error("non-finite component at index {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("text has no tokens")]
    NoTokens,
    #[error("dimension {0} is below the minimum of {MIN_HASH_DIMENSION}")]
    DimensionTooSmall(usize),
    #[error("embedding provider failed: {0}")]
    Provider(String),
}

/// A unit-norm embedding. Only [`normalize`] constructs one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for EmbeddingVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Component-wise arithmetic mean of equal-length vectors.
pub fn mean_pool<V: AsRef<[f64]>>(vectors: &[V]) -> Result<Vec<f64>, EmbeddingError> {
    let first = vectors.first().ok_or(EmbeddingError::EmptyPool)?.as_ref();
    let dim = first.len();
    let mut sum = vec![0.0; dim];
    for (index, v) in vectors.iter().enumerate() {
        let v = v.as_ref();
        if v.len() != dim {
            return Err(EmbeddingError::Ragged {
                index,
                expected: dim,
                found: v.len(),
            });
        }
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
    }
    let n = vectors.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

fn check_finite(v: &[f64]) -> Result<(), EmbeddingError> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(EmbeddingError::NonFinite(i)),
        None => Ok(()),
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `v` to unit Euclidean norm.
pub fn normalize(v: &[f64]) -> Result<EmbeddingVector, EmbeddingError> {
    check_finite(v)?;
    let n = norm(v);
    if n == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok(EmbeddingVector(v.iter().map(|x| x / n).collect()))
}

/// `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, EmbeddingError> {
    if a.len() != b.len() {
        return Err(EmbeddingError::DimensionMismatch(a.len(), b.len()));
    }
    check_finite(a)?;
    check_finite(b)?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Lower-cases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

// FNV-1a, 64-bit. Stable across platforms and releases, unlike std's hasher.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn token_pattern(token: &str, dimension: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()));
    let raw: Vec<f64> = (0..dimension)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let n = norm(&raw);
    raw.into_iter().map(|x| x / n).collect()
}

/// Deterministic bag-of-tokens embedding: each token maps to a seeded
/// pseudo-random unit vector; the token vectors are mean-pooled and
/// normalized.
pub fn hash_embed(text: &str, dimension: usize) -> Result<EmbeddingVector, EmbeddingError> {
    if dimension < MIN_HASH_DIMENSION {
        return Err(EmbeddingError::DimensionTooSmall(dimension));
    }
    let patterns: Vec<Vec<f64>> = tokenize(text)
        .iter()
        .map(|t| token_pattern(t, dimension))
        .collect();
    if patterns.is_empty() {
        return Err(EmbeddingError::NoTokens);
    }
    normalize(&mean_pool(&patterns)?)
}

/// Anything that turns text into unit-norm vectors of a fixed dimension.
pub trait EmbeddingProvider: Send + Sync {
    /// Label written into indexes and reports; two providers with the same
    /// identity must produce the same vectors.
    fn identity(&self) -> &str;

    fn dimension(&self) -> usize;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dimension: usize,
    identity: String,
}

impl HashEmbedder {
    pub fn new(dimension: usize) -> Result<Self, EmbeddingError> {
        if dimension < MIN_HASH_DIMENSION {
            return Err(EmbeddingError::DimensionTooSmall(dimension));
        }
        Ok(HashEmbedder {
            dimension,
            identity: format!("hash-embed/fnv1a-chacha8/d{dimension}"),
        })
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder::new(DEFAULT_HASH_DIMENSION).expect("default dimension is valid")
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        hash_embed(text, self.dimension)
    }
}

#[derive(Serialize)]
struct EmbeddingsRequest<'a> {
    model: &'a str,
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

/// Client for an OpenAI-compatible `POST <base>/v1/embeddings` endpoint.
///
/// The server's vectors are re-normalized locally so the unit-norm contract
/// holds whatever the server does.
pub struct RemoteEmbedder {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    dimension: usize,
    identity: String,
}

impl RemoteEmbedder {
    /// Connects and probes the server once to learn the dimension.
    pub fn connect(base_url: &str, model: &str, timeout: Duration) -> Result<Self, EmbeddingError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        let mut embedder = RemoteEmbedder {
            agent,
            endpoint: format!("{}/v1/embeddings", base_url.trim_end_matches('/')),
            model: model.to_string(),
            dimension: 0,
            identity: format!("remote/{model}"),
        };
        let probe = embedder.request(&["dimension probe"])?;
        embedder.dimension = probe[0].dimension();
        Ok(embedder)
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let body = EmbeddingsRequest {
            model: &self.model,
            input: texts,
        };
        let response: EmbeddingsResponse = self
            .agent
            .post(&self.endpoint)
            .send_json(&body)
            .map_err(|e| EmbeddingError::Provider(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| EmbeddingError::Provider(format!("malformed response: {e}")))?;
        if response.data.len() != texts.len() {
            return Err(EmbeddingError::Provider(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                response.data.len()
            )));
        }
        response
            .data
            .into_iter()
            .map(|d| {
                if self.dimension != 0 && d.embedding.len() != self.dimension {
                    return Err(EmbeddingError::DimensionMismatch(self.dimension, d.embedding.len()));
                }
                normalize(&d.embedding)
            })
            .collect()
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        Ok(self.request(&[text])?.remove(0))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let mut out = Vec::with_capacity(texts.len());
        for batch in texts.chunks(32) {
            out.extend(self.request(batch)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn mean_pool_examples() {
        assert_eq!(mean_pool(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(), [0.5, 0.5]);
        assert_eq!(mean_pool(&[[2.0, 4.0, 6.0]]).unwrap(), [2.0, 4.0, 6.0]);
        assert_eq!(
            mean_pool(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap(),
            [3.0, 4.0]
        );
    }

    #[test]
    fn mean_pool_errors() {
        let empty: [Vec<f64>; 0] = [];
        assert_eq!(mean_pool(&empty), Err(EmbeddingError::EmptyPool));
        let ragged = [vec![1.0, 2.0], vec![1.0]];
        assert!(matches!(
            mean_pool(&ragged),
            Err(EmbeddingError::Ragged { index: 1, expected: 2, found: 1 })
        ));
    }

    #[test]
    fn normalize_examples() {
        let v = normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
        assert_eq!(normalize(&[1.0, 0.0, 0.0]).unwrap().as_slice(), [1.0, 0.0, 0.0]);
        assert_eq!(normalize(&[0.0, 0.0]), Err(EmbeddingError::ZeroVector));
        assert_eq!(normalize(&[1.0, f64::NAN]), Err(EmbeddingError::NonFinite(1)));
    }

    #[test]
    fn cosine_examples() {
        let u = normalize(&[0.3, -0.2, 0.9]).unwrap();
        assert!((cosine_similarity(&u, &u).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap();
        assert!((c - 8.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_errors() {
        assert_eq!(
            cosine_similarity(&[1.0, 0.0], &[1.0]),
            Err(EmbeddingError::DimensionMismatch(2, 1))
        );
        assert_eq!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(EmbeddingError::ZeroVector)
        );
    }

    #[test]
    fn hash_embed_is_deterministic_and_unit() {
        let a = hash_embed("hammer sounding defect", 256).unwrap();
        let b = hash_embed("hammer sounding defect", 256).unwrap();
        assert_eq!(a, b);
        assert!((unit_norm(&a) - 1.0).abs() < 1e-9);
        assert!((cosine_similarity(&a, &b).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn hash_embed_errors() {
        assert_eq!(hash_embed("?? !!", 64), Err(EmbeddingError::NoTokens));
        assert_eq!(hash_embed("a", 4), Err(EmbeddingError::DimensionTooSmall(4)));
        assert!(HashEmbedder::new(7).is_err());
    }

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(
            tokenize("Magnetic Particle Testing (MT)"),
            ["magnetic", "particle", "testing", "mt"]
        );
        assert_eq!(tokenize("low-cost, 2nd ed."), ["low", "cost", "2nd", "ed"]);
    }

    #[test]
    fn disjoint_texts_score_below_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        use rand::Rng;
        for _ in 0..100 {
            let words_a: Vec<String> = (0..6).map(|i| format!("a{}x{i}", rng.random::<u32>())).collect();
            let words_b: Vec<String> = (0..6).map(|i| format!("b{}y{i}", rng.random::<u32>())).collect();
            let a = hash_embed(&words_a.join(" "), 256).unwrap();
            let b = hash_embed(&words_b.join(" "), 256).unwrap();
            let cross = cosine_similarity(&a, &b).unwrap();
            let own = cosine_similarity(&a, &a).unwrap();
            assert!(cross < own);
        }
    }

    #[test]
    fn pool_then_normalize_pipeline() {
        let tokens = [vec![1.0, 2.0, 0.0], vec![0.0, 2.0, 4.0]];
        let pooled = mean_pool(&tokens).unwrap();
        assert_eq!(pooled, [0.5, 2.0, 2.0]);
        let v = normalize(&pooled).unwrap();
        let n = (0.25f64 + 4.0 + 4.0).sqrt();
        for (got, want) in v.iter().zip([0.5 / n, 2.0 / n, 2.0 / n]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    fn vec_strategy(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, dim)
            .prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-6))
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_bounded(a in vec_strategy(12), b in vec_strategy(12)) {
            let ab = cosine_similarity(&a, &b).unwrap();
            let ba = cosine_similarity(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn cosine_scale_invariant(a in vec_strategy(8), b in vec_strategy(8), alpha in 0.01f64..100.0) {
            let scaled: Vec<f64> = a.iter().map(|x| x * alpha).collect();
            let c1 = cosine_similarity(&scaled, &b).unwrap();
            let c2 = cosine_similarity(&a, &b).unwrap();
            prop_assert!((c1 - c2).abs() < 1e-9);
        }

        #[test]
        fn provider_output_is_unit(text in "[a-z]{1,8}( [a-z]{1,8}){0,12}") {
            let v = HashEmbedder::default().embed(&text).unwrap();
            prop_assert!((unit_norm(&v) - 1.0).abs() < 1e-9);
        }
    }
}
