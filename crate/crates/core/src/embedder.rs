//! Text embeddings, cosine similarity and the meta-description cache.
//!
//! The built-in [`HashingEmbedder`] is dependency-free and fully deterministic:
//!
//! 1. lowercase, replace every non-alphanumeric character with a space,
//!    collapse runs of whitespace and trim;
//! 2. features are word unigrams (`w:<tok>`), adjacent word bigrams
//!    (`b:<tok> <tok>`) and character trigrams of each space-padded word
//!    (`c:<tri>`);
//! 3. each feature is hashed with XXH64 seeded with [`HASH_SEED`]; the bucket is
//!    `hash % dim` and the top bit of the hash picks the sign;
//! 4. raw term frequencies are accumulated as integers and the vector is
//!    L2-normalized. A text with no tokens maps to the zero vector.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use xxhash_rust::xxh64::xxh64;

use crate::registry::{Catalog, DescriptionStyle, ExpertId};

pub const DEFAULT_DIM: usize = 256;

/// Seed for XXH64 in feature hashing and catalog fingerprints.
pub const HASH_SEED: u64 = 0x6d6f_6972_615f_0001;

#[derive(Debug, Error, PartialEq)]
pub enum EmbedError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("expert pool is empty")]
    EmptyPool,
    #[error("embedding transport error: {0}")]
    Transport(String),
    #[error("embedding protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Embedding { values }
    }

    pub fn zeros(dim: usize) -> Self {
        Embedding { values: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Embedding { values: self.values.iter().map(|v| v * c).collect() }
    }
}

/// `dot(a, b) / (|a| |b|)`, or 0 when either vector is zero.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimensionMismatch(a.dim(), b.dim()));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Embedding, EmbedError>;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>, EmbedError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

/// Lowercases, maps punctuation to spaces and collapses whitespace.
pub fn normalize(text: &str) -> String {
    let mapped: String =
        text.chars().map(|c| if c.is_alphanumeric() { c } else { ' ' }).flat_map(char::to_lowercase).collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Feature strings for `text`, in extraction order.
pub fn features(text: &str) -> Vec<String> {
    let norm = normalize(text);
    let tokens: Vec<&str> = norm.split_whitespace().collect();
    let mut out = Vec::new();
    for t in &tokens {
        out.push(format!("w:{t}"));
    }
    for pair in tokens.windows(2) {
        out.push(format!("b:{} {}", pair[0], pair[1]));
    }
    for t in &tokens {
        let padded: Vec<char> = std::iter::once(' ').chain(t.chars()).chain(std::iter::once(' ')).collect();
        for tri in padded.windows(3) {
            out.push(format!("c:{}", tri.iter().collect::<String>()));
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder { dim: DEFAULT_DIM }
    }
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashingEmbedder { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn encode(&self, text: &str) -> Embedding {
        self.encode_features(features(text))
    }

    /// Hashes an arbitrary feature multiset. The result does not depend on
    /// iteration order.
    pub fn encode_features<I, S>(&self, feats: I) -> Embedding
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts = vec![0i64; self.dim];
        for f in feats {
            let h = xxh64(f.as_ref().as_bytes(), HASH_SEED);
            let bucket = (h % self.dim as u64) as usize;
            counts[bucket] += if h >> 63 == 0 { 1 } else { -1 };
        }
        let values: Vec<f64> = counts.into_iter().map(|c| c as f64).collect();
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Embedding { values };
        }
        Embedding { values: values.into_iter().map(|v| v / norm).collect() }
    }
}

impl Embedder for HashingEmbedder {
    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        Ok(self.encode(text))
    }
}

/// Stable hash of a catalog's style and `(id, description)` list.
pub fn catalog_fingerprint(catalog: &Catalog) -> u64 {
    let mut buf = Vec::new();
    buf.extend_from_slice(catalog.style.as_str().as_bytes());
    for e in &catalog.entries {
        buf.extend_from_slice(&(e.expert_id as u64).to_le_bytes());
        buf.extend_from_slice(&(e.description.len() as u64).to_le_bytes());
        buf.extend_from_slice(e.description.as_bytes());
    }
    xxh64(&buf, HASH_SEED)
}

/// Meta-description embeddings for one style, keyed by expert id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    pub style: DescriptionStyle,
    pub entries: BTreeMap<ExpertId, Embedding>,
    pub catalog_fingerprint: u64,
}

impl EmbeddingCache {
    pub fn build(catalog: &Catalog, embedder: &dyn Embedder) -> Result<Self, EmbedError> {
        if catalog.is_empty() {
            return Err(EmbedError::EmptyPool);
        }
        let texts: Vec<String> = catalog.entries.iter().map(|e| e.description.clone()).collect();
        let vectors = embedder.embed_batch(&texts)?;
        if vectors.len() != texts.len() {
            return Err(EmbedError::Protocol(format!("expected {} embeddings, got {}", texts.len(), vectors.len())));
        }
        Ok(EmbeddingCache {
            style: catalog.style,
            entries: catalog.entries.iter().map(|e| e.expert_id).zip(vectors).collect(),
            catalog_fingerprint: catalog_fingerprint(catalog),
        })
    }

    /// Builds a cache directly from vectors, ids assigned 0.. in order.
    pub fn from_embeddings(style: DescriptionStyle, vectors: Vec<Embedding>, catalog_fingerprint: u64) -> Self {
        EmbeddingCache { style, entries: vectors.into_iter().enumerate().collect(), catalog_fingerprint }
    }

    pub fn is_valid_for(&self, catalog: &Catalog) -> bool {
        self.style == catalog.style
            && self.entries.len() == catalog.len()
            && self.catalog_fingerprint == catalog_fingerprint(catalog)
    }
}

pub fn build_cache(catalog: &Catalog, embedder: &dyn Embedder) -> Result<EmbeddingCache, EmbedError> {
    EmbeddingCache::build(catalog, embedder)
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct RemoteResponse {
    embeddings: Vec<Vec<f64>>,
    dim: usize,
}

/// Client for an external embedding service speaking
/// `{"texts": [...]}` -> `{"embeddings": [[...]], "dim": D}`.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    endpoint: String,
    agent: ureq::Agent,
}

impl RemoteEmbedder {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        RemoteEmbedder { endpoint: endpoint.into(), agent: ureq::AgentBuilder::new().timeout(timeout).build() }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl Embedder for RemoteEmbedder {
    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        let mut out = self.embed_batch(&[text.to_string()])?;
        Ok(out.remove(0))
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>, EmbedError> {
        remote_embed_with(&self.agent, texts, &self.endpoint)
    }
}

pub fn remote_embed(texts: &[String], endpoint: &str) -> Result<Vec<Embedding>, EmbedError> {
    let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(30)).build();
    remote_embed_with(&agent, texts, endpoint)
}

fn remote_embed_with(agent: &ureq::Agent, texts: &[String], endpoint: &str) -> Result<Vec<Embedding>, EmbedError> {
    let resp = match agent.post(endpoint).send_json(RemoteRequest { texts }) {
        Ok(r) => r,
        Err(ureq::Error::Status(code, _)) => {
            return Err(EmbedError::Protocol(format!("embedding service returned HTTP {code}")))
        }
        Err(e) => return Err(EmbedError::Transport(e.to_string())),
    };
    let body: RemoteResponse = resp.into_json().map_err(|e| EmbedError::Protocol(format!("bad response body: {e}")))?;
    if body.embeddings.len() != texts.len() {
        return Err(EmbedError::Protocol(format!(
            "sent {} texts, received {} embeddings",
            texts.len(),
            body.embeddings.len()
        )));
    }
    if body.dim == 0 {
        return Err(EmbedError::Protocol("dim must be positive".into()));
    }
    if let Some(bad) = body.embeddings.iter().find(|v| v.len() != body.dim) {
        return Err(EmbedError::Protocol(format!("inconsistent dimensions: declared {}, got {}", body.dim, bad.len())));
    }
    Ok(body.embeddings.into_iter().map(Embedding::new).collect())
}
