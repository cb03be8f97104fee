//! Dense and sparse indexes over chunks: a flat cosine-similarity vector
//! collection with on-disk persistence, and an Okapi BM25 index.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Chunk, ChunkVariant};
use crate::provider::{EmbeddingKind, EmbeddingProvider, ProviderError};
use crate::retrieve::{Provenance, RetrievalResult};
use crate::scalar::{cmp_desc, Scalar};

/// Collection name used by the default configuration.
pub const DEFAULT_COLLECTION_NAME: &str = "Guide_2023_e5_multilingual";

const COLLECTION_FORMAT_VERSION: &str = "1";
const MANIFEST_FILE: &str = "manifest.json";
const VECTORS_FILE: &str = "vectors.f32";
const PAYLOADS_FILE: &str = "payloads.json";
const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("embedding failed for chunk `{chunk_id}`: {source}")]
    Embedding { chunk_id: String, source: ProviderError },
    #[error("query embedding failed: {0}")]
    QueryEmbedding(ProviderError),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("duplicate chunk_id `{0}`")]
    DuplicateId(String),
    #[error("vector for `{0}` is not unit-norm")]
    NotNormalized(String),
    #[error("invalid query: {0}")]
    Query(String),
    #[error("invalid BM25 parameters: {0}")]
    Params(String),
    #[error("storage error at {path}: {message}")]
    Storage { path: PathBuf, message: String },
    #[error("collection format error: {0}")]
    Format(String),
}

fn storage_err(path: &Path, e: impl std::fmt::Display) -> IndexError {
    IndexError::Storage { path: path.to_path_buf(), message: e.to_string() }
}

/// What a vector record points back to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkRef {
    pub chunk_id: String,
    pub filename: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub page: Option<u32>,
    pub variant: ChunkVariant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub html: Option<String>,
}

impl ChunkRef {
    pub fn of(chunk: &Chunk) -> Self {
        Self {
            chunk_id: chunk.id().to_string(),
            filename: chunk.metadata().filename.clone(),
            page: chunk.metadata().page,
            variant: chunk.variant(),
            html: chunk.html().map(str::to_string),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorRecord<F> {
    pub chunk_id: String,
    pub vector: Vec<F>,
    pub payload: ChunkRef,
}

fn norm<F: Scalar>(v: &[F]) -> f64 {
    v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN).powi(2)).sum::<f64>().sqrt()
}

/// Normalize a raw provider vector in f64 and convert to the storage scalar.
pub fn normalize<F: Scalar>(raw: &[f32]) -> Vec<F> {
    let n = raw.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if n == 0.0 {
        return vec![F::zero(); raw.len()];
    }
    raw.iter().map(|x| F::of(f64::from(*x) / n)).collect()
}

/// Chunks whose text was empty and therefore not embedded.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbedReport<F> {
    pub records: Vec<VectorRecord<F>>,
    pub skipped: Vec<String>,
}

/// Embed every chunk as a passage. Tables are embedded from their content plus
/// description (see [`Chunk::full_text`]).
pub fn embed_chunks<F: Scalar>(chunks: &[Chunk], provider: &dyn EmbeddingProvider) -> Result<EmbedReport<F>, IndexError> {
    let dimension = provider.dimension();
    if dimension == 0 {
        return Err(IndexError::Dimension { expected: 1, actual: 0 });
    }
    let mut report = EmbedReport { records: Vec::with_capacity(chunks.len()), skipped: Vec::new() };
    for chunk in chunks {
        let text = chunk.full_text();
        if text.trim().is_empty() {
            log::warn!("skipping chunk {} with empty text", chunk.id());
            report.skipped.push(chunk.id().to_string());
            continue;
        }
        let vectors = provider
            .embed(&[text], EmbeddingKind::Passage)
            .map_err(|source| IndexError::Embedding { chunk_id: chunk.id().to_string(), source })?;
        let raw = vectors.into_iter().next().ok_or_else(|| IndexError::Embedding {
            chunk_id: chunk.id().to_string(),
            source: ProviderError::InvalidResponse("no vector returned".into()),
        })?;
        if raw.len() != dimension {
            return Err(IndexError::Dimension { expected: dimension, actual: raw.len() });
        }
        report.records.push(VectorRecord {
            chunk_id: chunk.id().to_string(),
            vector: normalize(&raw),
            payload: ChunkRef::of(chunk),
        });
    }
    Ok(report)
}

/// Flat exhaustive-scan vector collection keyed by chunk id.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorCollection<F> {
    name: String,
    dimension: usize,
    records: BTreeMap<String, VectorRecord<F>>,
}

#[derive(PartialEq)]
struct Candidate<'a, F> {
    score: F,
    chunk_id: &'a str,
}

impl<F: Scalar> Eq for Candidate<'_, F> {}

impl<F: Scalar> PartialOrd for Candidate<'_, F> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<F: Scalar> Ord for Candidate<'_, F> {
    // "Better" candidates compare as smaller so the max-heap root is the worst kept.
    fn cmp(&self, other: &Self) -> Ordering {
        cmp_desc(self.score, other.score).then_with(|| self.chunk_id.cmp(other.chunk_id))
    }
}

impl<F: Scalar> VectorCollection<F> {
    pub fn new(name: impl Into<String>, dimension: usize) -> Self {
        Self { name: name.into(), dimension, records: BTreeMap::new() }
    }

    pub fn from_records(name: impl Into<String>, dimension: usize, records: Vec<VectorRecord<F>>) -> Result<Self, IndexError> {
        let mut collection = Self::new(name, dimension);
        for record in records {
            collection.insert(record)?;
        }
        Ok(collection)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, chunk_id: &str) -> Option<&VectorRecord<F>> {
        self.records.get(chunk_id)
    }

    /// Records in ascending chunk-id order.
    pub fn records(&self) -> impl Iterator<Item = &VectorRecord<F>> {
        self.records.values()
    }

    pub fn insert(&mut self, record: VectorRecord<F>) -> Result<(), IndexError> {
        if record.vector.len() != self.dimension {
            return Err(IndexError::Dimension { expected: self.dimension, actual: record.vector.len() });
        }
        let tolerance = UNIT_NORM_TOLERANCE.max(F::epsilon().to_f64().unwrap_or(0.0) * self.dimension as f64);
        if (norm(&record.vector) - 1.0).abs() > tolerance {
            return Err(IndexError::NotNormalized(record.chunk_id));
        }
        if self.records.contains_key(&record.chunk_id) {
            return Err(IndexError::DuplicateId(record.chunk_id));
        }
        self.records.insert(record.chunk_id.clone(), record);
        Ok(())
    }

    /// Top-k records by cosine similarity to a unit-norm query, ties broken by
    /// ascending chunk id.
    pub fn dense_search(&self, query_vector: &[F], k: usize) -> Result<Vec<RetrievalResult<F>>, IndexError> {
        if query_vector.len() != self.dimension {
            return Err(IndexError::Dimension { expected: self.dimension, actual: query_vector.len() });
        }
        if k == 0 {
            return Err(IndexError::Query("k must be positive".into()));
        }
        let mut heap: BinaryHeap<Candidate<'_, F>> = BinaryHeap::with_capacity(k + 1);
        for record in self.records.values() {
            let score = dot(query_vector, &record.vector);
            heap.push(Candidate { score, chunk_id: &record.chunk_id });
            if heap.len() > k {
                heap.pop();
            }
        }
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| RetrievalResult::new(c.chunk_id, c.score, Provenance::Dense))
            .collect())
    }
}

/// Dot product accumulated left to right in the scalar type.
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (x, y)| acc + *x * *y)
}

// ---------------------------------------------------------------------------
// Persistence

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    name: String,
    dimension: usize,
    count: usize,
    format_version: String,
}

/// Directory a collection named `name` occupies under `root`.
pub fn collection_dir(root: &Path, name: &str) -> PathBuf {
    root.join(name)
}

/// Write `collection` to `root/<name>/`: a JSON manifest, little-endian f32
/// vectors in payload order, and a JSON payload list. Returns the directory.
pub fn persist_collection<F: Scalar>(collection: &VectorCollection<F>, root: &Path) -> Result<PathBuf, IndexError> {
    let dir = collection_dir(root, collection.name());
    fs::create_dir_all(&dir).map_err(|e| storage_err(&dir, e))?;

    let mut vectors = Vec::with_capacity(collection.len() * collection.dimension() * 4);
    let mut payloads = Vec::with_capacity(collection.len());
    for record in collection.records() {
        for x in &record.vector {
            vectors.extend_from_slice(&x.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
        payloads.push(&record.payload);
    }
    let manifest = Manifest {
        name: collection.name().to_string(),
        dimension: collection.dimension(),
        count: collection.len(),
        format_version: COLLECTION_FORMAT_VERSION.to_string(),
    };

    let write = |file: &str, bytes: &[u8]| {
        let path = dir.join(file);
        fs::write(&path, bytes).map_err(|e| storage_err(&path, e))
    };
    write(VECTORS_FILE, &vectors)?;
    write(PAYLOADS_FILE, &serde_json::to_vec_pretty(&payloads).map_err(|e| storage_err(&dir, e))?)?;
    write(MANIFEST_FILE, &serde_json::to_vec_pretty(&manifest).map_err(|e| storage_err(&dir, e))?)?;
    Ok(dir)
}

/// Read a collection directory written by [`persist_collection`].
pub fn open_collection<F: Scalar>(dir: &Path) -> Result<VectorCollection<F>, IndexError> {
    let read = |file: &str| {
        let path = dir.join(file);
        fs::read(&path).map_err(|e| storage_err(&path, e))
    };
    let manifest: Manifest = serde_json::from_slice(&read(MANIFEST_FILE)?)
        .map_err(|e| storage_err(&dir.join(MANIFEST_FILE), e))?;
    if manifest.format_version != COLLECTION_FORMAT_VERSION {
        return Err(IndexError::Format(format!("unsupported format_version `{}`", manifest.format_version)));
    }
    if manifest.dimension == 0 {
        return Err(IndexError::Format("dimension must be positive".into()));
    }
    let payloads: Vec<ChunkRef> = serde_json::from_slice(&read(PAYLOADS_FILE)?)
        .map_err(|e| storage_err(&dir.join(PAYLOADS_FILE), e))?;
    let vectors = read(VECTORS_FILE)?;
    if payloads.len() != manifest.count {
        return Err(IndexError::Format(format!(
            "manifest count {} does not match {} payloads",
            manifest.count,
            payloads.len()
        )));
    }
    let row_bytes = manifest.dimension * 4;
    if vectors.len() != row_bytes * manifest.count {
        return Err(IndexError::Format(format!(
            "vector file holds {} bytes, expected {} for {} × {}",
            vectors.len(),
            row_bytes * manifest.count,
            manifest.count,
            manifest.dimension
        )));
    }
    let mut collection = VectorCollection::new(manifest.name, manifest.dimension);
    for (payload, row) in payloads.into_iter().zip(vectors.chunks_exact(row_bytes)) {
        let vector = row
            .chunks_exact(4)
            .map(|b| F::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        collection.insert(VectorRecord { chunk_id: payload.chunk_id.clone(), vector, payload })?;
    }
    Ok(collection)
}

// ---------------------------------------------------------------------------
// BM25

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params<F> {
    pub k1: F,
    pub b: F,
}

impl<F: Scalar> Default for Bm25Params<F> {
    fn default() -> Self {
        Self { k1: F::of(1.5), b: F::of(0.75) }
    }
}

impl<F: Scalar> Bm25Params<F> {
    pub fn validate(&self) -> Result<(), IndexError> {
        if !(self.k1 > F::zero()) {
            return Err(IndexError::Params(format!("k1 must be > 0, got {}", self.k1)));
        }
        if !(self.b >= F::zero() && self.b <= F::one()) {
            return Err(IndexError::Params(format!("b must lie in [0, 1], got {}", self.b)));
        }
        Ok(())
    }
}

/// Lowercase and split on every non-alphanumeric codepoint.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Okapi BM25 over an inverted index. Corpus statistics are read at query
/// time, so an index grown document by document scores exactly like one built
/// in a single pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Index<F> {
    params: Bm25Params<F>,
    doc_ids: Vec<String>,
    document_lengths: Vec<u64>,
    total_length: u64,
    /// term → (document index, term frequency), ascending document index.
    postings: HashMap<String, Vec<(usize, u64)>>,
}

impl<F: Scalar> Bm25Index<F> {
    pub fn new(params: Bm25Params<F>) -> Result<Self, IndexError> {
        params.validate()?;
        Ok(Self {
            params,
            doc_ids: Vec::new(),
            document_lengths: Vec::new(),
            total_length: 0,
            postings: HashMap::new(),
        })
    }

    pub fn build<'a, I>(documents: I, params: Bm25Params<F>) -> Result<Self, IndexError>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut index = Self::new(params)?;
        for (id, text) in documents {
            index.add_document(id, text)?;
        }
        Ok(index)
    }

    pub fn from_chunks(chunks: &[Chunk], params: Bm25Params<F>) -> Result<Self, IndexError> {
        let mut index = Self::new(params)?;
        for chunk in chunks {
            index.add_document(chunk.id(), &chunk.full_text())?;
        }
        Ok(index)
    }

    pub fn add_document(&mut self, doc_id: &str, text: &str) -> Result<(), IndexError> {
        if self.doc_ids.iter().any(|d| d == doc_id) {
            return Err(IndexError::DuplicateId(doc_id.to_string()));
        }
        let doc = self.doc_ids.len();
        let tokens = tokenize(text);
        let mut tf: HashMap<String, u64> = HashMap::new();
        for token in &tokens {
            *tf.entry(token.clone()).or_default() += 1;
        }
        for (term, count) in tf {
            self.postings.entry(term).or_default().push((doc, count));
        }
        self.doc_ids.push(doc_id.to_string());
        self.document_lengths.push(tokens.len() as u64);
        self.total_length += tokens.len() as u64;
        Ok(())
    }

    pub fn params(&self) -> Bm25Params<F> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn document_lengths(&self) -> &[u64] {
        &self.document_lengths
    }

    /// Total and document count; `avgdl` is their exact ratio.
    pub fn length_ratio(&self) -> (u64, u64) {
        (self.total_length, self.doc_ids.len() as u64)
    }

    pub fn avgdl(&self) -> F {
        if self.doc_ids.is_empty() {
            return F::zero();
        }
        F::of(self.total_length) / F::of(self.doc_ids.len())
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn term_frequency(&self, doc_index: usize, term: &str) -> u64 {
        self.postings
            .get(term)
            .and_then(|p| p.binary_search_by_key(&doc_index, |(d, _)| *d).ok().map(|i| p[i].1))
            .unwrap_or(0)
    }

    /// `ln((N - df + 0.5) / (df + 0.5) + 1)`
    pub fn idf(&self, term: &str) -> F {
        let n = F::of(self.doc_ids.len());
        let df = F::of(self.df(term));
        let half = F::of(0.5);
        ((n - df + half) / (df + half) + F::one()).ln()
    }

    /// Score every document with a nonzero score. Repeated query tokens
    /// contribute once per occurrence.
    pub fn scores(&self, query: &str) -> Result<Vec<(usize, F)>, IndexError> {
        let terms = tokenize(query);
        if terms.is_empty() {
            return Err(IndexError::Query("query has no tokens".into()));
        }
        let avgdl = self.avgdl();
        let Bm25Params { k1, b } = self.params;
        let mut acc: BTreeMap<usize, F> = BTreeMap::new();
        for term in &terms {
            let Some(postings) = self.postings.get(term) else { continue };
            let idf = self.idf(term);
            for &(doc, tf) in postings {
                let tf = F::of(tf);
                let len_norm = F::one() - b + b * F::of(self.document_lengths[doc]) / avgdl;
                let term_score = idf * tf * (k1 + F::one()) / (tf + k1 * len_norm);
                let slot = acc.entry(doc).or_insert_with(F::zero);
                *slot = *slot + term_score;
            }
        }
        Ok(acc.into_iter().filter(|(_, s)| *s > F::zero()).collect())
    }

    /// Top-k documents by BM25, ties broken by ascending id; zero scores omitted.
    pub fn search(&self, query: &str, k: usize) -> Result<Vec<RetrievalResult<F>>, IndexError> {
        if k == 0 {
            return Err(IndexError::Query("k must be positive".into()));
        }
        let mut ranked: Vec<(&str, F)> =
            self.scores(query)?.into_iter().map(|(doc, s)| (self.doc_ids[doc].as_str(), s)).collect();
        ranked.sort_by(|a, b| cmp_desc(a.1, b.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(k);
        Ok(ranked.into_iter().map(|(id, s)| RetrievalResult::new(id, s, Provenance::Sparse)).collect())
    }
}
