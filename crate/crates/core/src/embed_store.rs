//! Hashed-feature text embeddings and a brute-force cosine index.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

pub const DIM: usize = 256;
pub const DEFAULT_CHUNK_SIZE: usize = 64;
pub const DEFAULT_CHUNK_OVERLAP: usize = 8;
pub const DEFAULT_K: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("chunk size must exceed overlap (size {size}, overlap {overlap})")]
    InvalidChunking { size: usize, overlap: usize },
    #[error("duplicate chunk id {0}")]
    DuplicateId(String),
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("bad index line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, EmbedError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ChunkSource {
    ParcelRecord,
    Taxonomy,
    Abbreviations,
    InternalDoc,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentChunk {
    pub id: String,
    pub text: String,
    pub source: ChunkSource,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl DocumentChunk {
    pub fn new(id: impl Into<String>, text: impl Into<String>, source: ChunkSource) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            source,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.metadata.insert(key.to_string(), value.into());
        self
    }
}

/// Unit-norm vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

const STOPWORDS: [&str; 56] = [
    "a", "an", "the", "is", "are", "was", "were", "be", "to", "of", "in", "on", "at", "for", "and", "or", "it", "its", "my", "me",
    "i", "you", "your", "what", "does", "do", "how", "why", "when", "where", "which", "can", "please", "mean", "means", "stand",
    "stands", "with", "this", "that", "by", "de", "het", "een", "en", "van", "wat", "mijn", "ik", "op", "hoe", "waar", "waarom",
    "betekent", "voor", "je",
];

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Lowercased alphanumeric words with stopwords removed.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty() && !STOPWORDS.contains(w))
        .map(str::to_string)
        .collect()
}

/// Word unigrams plus padded character trigrams of each word.
fn features(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for w in tokenize(text) {
        let padded: Vec<char> = format!("#{w}#").chars().collect();
        out.push(format!("w:{w}"));
        for tri in padded.windows(3) {
            out.push(format!("c:{}", tri.iter().collect::<String>()));
        }
    }
    out
}

/// Deterministic, case-insensitive embedding. Texts without features map to
/// the first basis vector.
pub fn embed_text(text: &str) -> EmbeddingVector {
    let mut v = vec![0.0; DIM];
    for f in features(text) {
        let h = fnv1a(f.as_bytes());
        let bucket = (h % DIM as u64) as usize;
        // word features weigh more than their trigrams
        let w = if f.starts_with("w:") { 2.0 } else { 1.0 };
        let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
        v[bucket] += sign * w;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        v[0] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    EmbeddingVector(v)
}

pub fn cosine_sim(q: &EmbeddingVector, d: &EmbeddingVector) -> Result<f64> {
    if q.dim() != d.dim() {
        return Err(EmbedError::DimensionMismatch(q.dim(), d.dim()));
    }
    let dot: f64 = q.0.iter().zip(&d.0).map(|(a, b)| a * b).sum();
    let denom = q.norm() * d.norm();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / denom).clamp(-1.0, 1.0))
}

/// Whitespace-token windows of `size` tokens, consecutive windows sharing
/// `overlap` tokens. Ids are `<prefix>:<n>`.
pub fn chunk_document(text: &str, size: usize, overlap: usize, prefix: &str, source: ChunkSource) -> Result<Vec<DocumentChunk>> {
    if size == 0 || overlap >= size {
        return Err(EmbedError::InvalidChunking { size, overlap });
    }
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let mut out = Vec::new();
    let step = size - overlap;
    let mut start = 0;
    while start < tokens.len() {
        let end = (start + size).min(tokens.len());
        out.push(
            DocumentChunk::new(format!("{prefix}:{}", out.len()), tokens[start..end].join(" "), source)
                .with_meta("start", start.to_string())
                .with_meta("end", end.to_string()),
        );
        if end == tokens.len() {
            break;
        }
        start += step;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub chunk: DocumentChunk,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VectorIndex {
    entries: BTreeMap<String, (EmbeddingVector, DocumentChunk)>,
}

#[derive(Serialize, Deserialize)]
struct IndexLine {
    id: String,
    source: ChunkSource,
    metadata: BTreeMap<String, String>,
    text: String,
    vector: Vec<f64>,
}

impl VectorIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&DocumentChunk> {
        self.entries.get(id).map(|(_, c)| c)
    }

    pub fn vector(&self, id: &str) -> Option<&EmbeddingVector> {
        self.entries.get(id).map(|(v, _)| v)
    }

    pub fn chunks(&self) -> impl Iterator<Item = &DocumentChunk> {
        self.entries.values().map(|(_, c)| c)
    }

    pub fn insert(&mut self, chunk: DocumentChunk) -> Result<()> {
        if self.entries.contains_key(&chunk.id) {
            return Err(EmbedError::DuplicateId(chunk.id));
        }
        self.upsert(chunk);
        Ok(())
    }

    /// Inserts or replaces; returns true when an existing chunk was replaced.
    pub fn upsert(&mut self, chunk: DocumentChunk) -> bool {
        let v = embed_text(&chunk.text);
        self.entries.insert(chunk.id.clone(), (v, chunk)).is_some()
    }

    /// Top-k over chunks accepted by `filter`.
    pub fn retrieve_where(&self, query: &str, k: usize, filter: impl Fn(&DocumentChunk) -> bool) -> Result<Vec<RetrievalResult>> {
        if k == 0 {
            return Err(EmbedError::InvalidK);
        }
        if self.entries.is_empty() {
            return Err(EmbedError::EmptyIndex);
        }
        let q = embed_text(query);
        let mut scored: Vec<(f64, &DocumentChunk)> = Vec::new();
        for (v, c) in self.entries.values().filter(|(_, c)| filter(c)) {
            scored.push((cosine_sim(&q, v)?, c));
        }
        // BTreeMap iteration is id-ordered and the sort is stable, so equal
        // scores stay in ascending id order
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(score, c)| RetrievalResult { chunk: c.clone(), score })
            .collect())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (v, c) in self.entries.values() {
            let line = IndexLine {
                id: c.id.clone(),
                source: c.source,
                metadata: c.metadata.clone(),
                text: c.text.clone(),
                vector: v.0.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("index lines serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut index = Self::new();
        for (i, l) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let line: IndexLine = serde_json::from_str(l).map_err(|e| EmbedError::Corrupt {
                line: i + 1,
                reason: e.to_string(),
            })?;
            if line.vector.len() != DIM {
                return Err(EmbedError::DimensionMismatch(line.vector.len(), DIM));
            }
            let chunk = DocumentChunk {
                id: line.id,
                text: line.text,
                source: line.source,
                metadata: line.metadata,
            };
            if index.entries.contains_key(&chunk.id) {
                return Err(EmbedError::DuplicateId(chunk.id));
            }
            index.entries.insert(chunk.id.clone(), (EmbeddingVector(line.vector), chunk));
        }
        Ok(index)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }
}

pub fn index_chunks(chunks: Vec<DocumentChunk>) -> Result<VectorIndex> {
    let mut index = VectorIndex::new();
    for c in chunks {
        index.insert(c)?;
    }
    Ok(index)
}

pub fn retrieve(index: &VectorIndex, query: &str, k: usize) -> Result<Vec<RetrievalResult>> {
    index.retrieve_where(query, k, |_| true)
}

/// Many readers, one writer; a write swaps in a fully built index.
#[derive(Debug, Clone, Default)]
pub struct SharedIndex(Arc<RwLock<VectorIndex>>);

impl SharedIndex {
    pub fn new(index: VectorIndex) -> Self {
        Self(Arc::new(RwLock::new(index)))
    }

    pub fn read<T>(&self, f: impl FnOnce(&VectorIndex) -> T) -> T {
        f(&self.0.read().unwrap_or_else(|e| e.into_inner()))
    }

    pub fn write<T>(&self, f: impl FnOnce(&mut VectorIndex) -> T) -> T {
        f(&mut self.0.write().unwrap_or_else(|e| e.into_inner()))
    }
}
