//! Per-agent knowledge bases: chunking, embedding, and exact top-n retrieval.
//!
//! Retrieval is an exhaustive scan over cosine scores. Corpora here are a few
//! hundred chunks at most, where a scan is both faster to run and easier to
//! reason about than an approximate index, and results are exactly
//! reproducible.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, EmbeddingBackend};

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error("knowledge base '{0}' not found")]
    UnknownBase(String),
    #[error("embedding batch returned {got} vectors for {expected} texts")]
    BatchShape { expected: usize, got: usize },
}

/// One retrievable unit of a document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocChunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub idx: u32,
    pub text: String,
}

/// Cosine similarity with f64 accumulation in index order. Callers that need
/// bit-identical scores must feed slices in the same order; this function
/// never reorders. Zero-norm inputs score 0.
pub fn cosine_f32(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine over mismatched dims");
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for i in 0..a.len() {
        let (x, y) = (a[i] as f64, b[i] as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Splits `text` into chunks of at most `max_chars` characters, preferring
/// sentence boundaries and hard-splitting single sentences that exceed the
/// budget. Chunks partition the input: concatenating them in order yields
/// the original text byte for byte.
pub fn chunk_text(text: &str, max_chars: usize) -> Vec<String> {
    assert!(max_chars >= 1, "max_chars must be ≥ 1");
    let sentences = split_sentences(text);
    let mut chunks: Vec<String> = Vec::new();
    let mut current = String::new();
    let mut current_chars = 0usize;
    for sentence in sentences {
        let sentence_chars = sentence.chars().count();
        if sentence_chars > max_chars {
            if !current.is_empty() {
                chunks.push(std::mem::take(&mut current));
                current_chars = 0;
            }
            chunks.extend(hard_split(&sentence, max_chars));
            continue;
        }
        if current_chars + sentence_chars > max_chars && !current.is_empty() {
            chunks.push(std::mem::take(&mut current));
            current_chars = 0;
        }
        current.push_str(&sentence);
        current_chars += sentence_chars;
    }
    if !current.is_empty() {
        chunks.push(current);
    }
    chunks
}

/// Sentence-sized pieces whose concatenation is exactly the input. A piece
/// ends after '.', '!', '?' or '\n' plus any immediately following
/// whitespace, which keeps inter-sentence whitespace attached to the earlier
/// piece.
fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < chars.len() {
        let c = chars[i];
        if matches!(c, '.' | '!' | '?' | '\n') {
            let mut end = i + 1;
            while end < chars.len() && chars[end].is_whitespace() {
                end += 1;
            }
            out.push(chars[start..end].iter().collect());
            start = end;
            i = end;
        } else {
            i += 1;
        }
    }
    if start < chars.len() {
        out.push(chars[start..].iter().collect());
    }
    out
}

fn hard_split(s: &str, max_chars: usize) -> Vec<String> {
    let chars: Vec<char> = s.chars().collect();
    chars
        .chunks(max_chars)
        .map(|c| c.iter().collect())
        .collect()
}

fn make_chunk_id(doc_id: &str, idx: u32) -> String {
    format!("{doc_id}#{idx:04}")
}

pub const DEFAULT_CHUNK_CHARS: usize = 400;

/// One agent's embedded corpus. `chunks` and `embeddings` are parallel
/// arrays in chunk_id order.
pub struct KnowledgeBase {
    chunks: Vec<DocChunk>,
    embeddings: Vec<Vec<f32>>,
}

impl KnowledgeBase {
    /// Chunks and embeds `docs` (pairs of doc_id and full text). Documents
    /// with no non-whitespace content are skipped and reported in the
    /// returned warnings.
    pub fn ingest(
        docs: &[(String, String)],
        embedder: &dyn EmbeddingBackend,
        max_chars: usize,
    ) -> Result<(Self, Vec<String>), KnowledgeError> {
        let mut warnings = Vec::new();
        let mut chunks: Vec<DocChunk> = Vec::new();
        for (doc_id, text) in docs {
            if text.trim().is_empty() {
                warnings.push(format!("document '{doc_id}' is empty, skipped"));
                continue;
            }
            for (idx, piece) in chunk_text(text, max_chars).into_iter().enumerate() {
                chunks.push(DocChunk {
                    chunk_id: make_chunk_id(doc_id, idx as u32),
                    doc_id: doc_id.clone(),
                    idx: idx as u32,
                    text: piece,
                });
            }
        }
        chunks.sort_by(|a, b| a.chunk_id.cmp(&b.chunk_id));

        let mut embeddings = Vec::with_capacity(chunks.len());
        for batch in chunks.chunks(64) {
            let texts: Vec<String> = batch.iter().map(|c| c.text.clone()).collect();
            let resp = embedder.embed(&texts)?;
            if resp.vectors.len() != texts.len() {
                return Err(KnowledgeError::BatchShape {
                    expected: texts.len(),
                    got: resp.vectors.len(),
                });
            }
            embeddings.extend(resp.vectors);
        }
        Ok((Self { chunks, embeddings }, warnings))
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn chunks(&self) -> &[DocChunk] {
        &self.chunks
    }

    /// Exact top-n by cosine score against `query_vec`, descending score,
    /// ties broken by ascending chunk_id. Returns fewer than n items when
    /// the base is smaller.
    pub fn retrieve(&self, query_vec: &[f32], n: usize) -> Vec<EvidenceItem> {
        let mut scored: Vec<(usize, f64)> = self
            .embeddings
            .iter()
            .enumerate()
            .map(|(i, emb)| (i, cosine_f32(emb, query_vec)))
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| self.chunks[a.0].chunk_id.cmp(&self.chunks[b.0].chunk_id))
        });
        scored
            .into_iter()
            .take(n)
            .map(|(i, score)| EvidenceItem {
                chunk_id: self.chunks[i].chunk_id.clone(),
                score,
                text: self.chunks[i].text.clone(),
            })
            .collect()
    }
}

/// One retrieved snippet as recorded in transcripts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub chunk_id: String,
    pub score: f64,
    pub text: String,
}

/// The evidence block input for one agent turn.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievedEvidence {
    pub items: Vec<EvidenceItem>,
    pub query_sha256: String,
    pub truncated_query: bool,
}

/// All knowledge bases of a scenario, keyed by knowledge_ref.
pub struct KnowledgeIndex {
    bases: BTreeMap<String, KnowledgeBase>,
}

impl KnowledgeIndex {
    pub fn new(bases: BTreeMap<String, KnowledgeBase>) -> Self {
        Self { bases }
    }

    pub fn base(&self, knowledge_ref: &str) -> Result<&KnowledgeBase, KnowledgeError> {
        self.bases
            .get(knowledge_ref)
            .ok_or_else(|| KnowledgeError::UnknownBase(knowledge_ref.to_string()))
    }

    pub fn refs(&self) -> impl Iterator<Item = &String> {
        self.bases.keys()
    }
}
