//! Text embeddings for similarity filtering.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Deserialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::client::http::{endpoint_url, HttpBackend};
use crate::client::{BackendError, EndpointConfig};
use crate::error::{Error, Result};

/// Dimension of the hashed-trigram mock embedding.
pub const MOCK_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// dot(a, b) / (|a| |b|), clamped into [-1, 1].
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Contract(format!(
            "embedding dims differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    let na = a.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Contract("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;
}

fn non_empty(texts: &[String]) -> Result<()> {
    if texts.is_empty() {
        return Err(Error::Contract("embed needs at least one text".into()));
    }
    Ok(())
}

/// Deterministic offline embedder: signed feature hashing of character
/// trigrams into `MOCK_DIM` buckets.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockEmbedder;

impl MockEmbedder {
    pub fn embed_one(text: &str) -> EmbeddingVector {
        let chars: Vec<char> = text.chars().collect();
        let mut v = vec![0.0; MOCK_DIM];
        let mut add = |gram: &[char]| {
            let s: String = gram.iter().collect();
            let h = Sha256::digest(s.as_bytes());
            let bucket = usize::from(u16::from_le_bytes([h[0], h[1]])) % MOCK_DIM;
            let sign = if h[2] & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        };
        if chars.len() < 3 {
            if !chars.is_empty() {
                add(&chars);
            }
        } else {
            chars.windows(3).for_each(&mut add);
        }
        EmbeddingVector::new(v)
    }
}

impl Embedder for MockEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        non_empty(texts)?;
        Ok(texts.iter().map(|t| Self::embed_one(t)).collect())
    }
}

/// Fixed text → vector table, for hand-built fixtures.
#[derive(Debug, Clone, Default)]
pub struct TableEmbedder {
    pub table: BTreeMap<String, Vec<f64>>,
}

impl TableEmbedder {
    /// Reads a JSON object mapping text to vector.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(Self { table })
    }
}

impl Embedder for TableEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        non_empty(texts)?;
        texts
            .iter()
            .map(|t| {
                self.table
                    .get(t)
                    .map(|v| EmbeddingVector::new(v.clone()))
                    .ok_or_else(|| Error::Data(format!("no table embedding for {t:?}")))
            })
            .collect()
    }
}

/// OpenAI-compatible `/v1/embeddings` client.
pub struct RemoteEmbedder {
    config: EndpointConfig,
    http: HttpBackend,
}

#[derive(Deserialize)]
struct WireEmbeddings {
    data: Vec<WireEmbedding>,
}

#[derive(Deserialize)]
struct WireEmbedding {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f64>,
}

impl RemoteEmbedder {
    pub fn new(config: EndpointConfig) -> Result<Self> {
        config.validate()?;
        let http = HttpBackend::new(&config)?;
        Ok(Self { config, http })
    }

    fn transport(&self, message: String) -> Error {
        Error::Transport {
            endpoint: self.config.base_url.clone(),
            message,
        }
    }
}

impl Embedder for RemoteEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        non_empty(texts)?;
        let url = endpoint_url(&self.config.base_url, "v1/embeddings");
        let body = json!({ "model": self.config.model_name, "input": texts });
        let mut attempt = 0;
        let text = loop {
            match self.http.post(&url, &body) {
                Ok(t) => break t,
                Err(BackendError::Transient(msg)) if attempt < self.config.max_retries => {
                    log::debug!("embeddings: transient failure ({msg}), retry {}", attempt + 1);
                    std::thread::sleep(self.config.backoff(attempt));
                    attempt += 1;
                }
                Err(BackendError::Transient(msg) | BackendError::Permanent(msg)) => {
                    return Err(self.transport(msg))
                }
            }
        };
        let wire: WireEmbeddings =
            serde_json::from_str(&text).map_err(|e| self.transport(format!("malformed embeddings response: {e}")))?;
        if wire.data.len() != texts.len() {
            return Err(self.transport(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                wire.data.len()
            )));
        }
        let mut data: Vec<(usize, Vec<f64>)> = wire
            .data
            .into_iter()
            .enumerate()
            .map(|(i, d)| (d.index.unwrap_or(i), d.embedding))
            .collect();
        data.sort_by_key(|(i, _)| *i);
        Ok(data.into_iter().map(|(_, v)| EmbeddingVector::new(v)).collect())
    }
}
