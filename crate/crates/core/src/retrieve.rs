//! Hybrid retrieval: weighted reciprocal-rank fusion of dense and BM25 result
//! lists, widened by language-model query reformulations.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::answer::{ContextBundle, ContextChunk, ContextTable};
use crate::corpus::Chunk;
use crate::index::{embed_chunks, normalize, Bm25Index, Bm25Params, IndexError, VectorCollection};
use crate::provider::{EmbeddingKind, EmbeddingProvider, LanguageProvider, ProviderError};
use crate::scalar::{cmp_desc, Scalar};

#[derive(Debug, thiserror::Error)]
pub enum RetrieveError {
    #[error("query expansion failed: {0}")]
    Expansion(ProviderError),
    #[error("invalid retrieval configuration: {0}")]
    Config(String),
    #[error("empty question")]
    EmptyQuestion,
    #[error(transparent)]
    Index(#[from] IndexError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Dense,
    Sparse,
    Fused,
}

/// A scored chunk reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult<F = f64> {
    pub chunk_id: String,
    pub score: F,
    pub provenance: Provenance,
    pub source_query: String,
}

impl<F: Scalar> RetrievalResult<F> {
    pub fn new(chunk_id: impl Into<String>, score: F, provenance: Provenance) -> Self {
        Self { chunk_id: chunk_id.into(), score, provenance, source_query: String::new() }
    }

    pub fn with_source_query(mut self, query: impl Into<String>) -> Self {
        self.source_query = query.into();
        self
    }

    pub fn cast<G: Scalar>(self) -> RetrievalResult<G> {
        RetrievalResult {
            chunk_id: self.chunk_id,
            score: G::of(self.score),
            provenance: self.provenance,
            source_query: self.source_query,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub dense_k: usize,
    pub sparse_k: usize,
    /// `(dense, sparse)` fusion weights.
    pub weights: (f64, f64),
    pub rrf_constant: f64,
    pub expansion_count: usize,
    pub final_top_n: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { dense_k: 6, sparse_k: 2, weights: (0.5, 0.5), rrf_constant: 60.0, expansion_count: 3, final_top_n: 8 }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<(), RetrieveError> {
        let (wd, ws) = self.weights;
        if !(wd >= 0.0 && ws >= 0.0 && wd + ws > 0.0) {
            return Err(RetrieveError::Config(format!("weights must be non-negative with a positive sum, got ({wd}, {ws})")));
        }
        if self.dense_k == 0 || self.sparse_k == 0 || self.final_top_n == 0 {
            return Err(RetrieveError::Config("dense_k, sparse_k and final_top_n must be at least 1".into()));
        }
        if !(self.rrf_constant >= 0.0 && self.rrf_constant.is_finite()) {
            return Err(RetrieveError::Config(format!("rrf_constant must be finite and non-negative, got {}", self.rrf_constant)));
        }
        Ok(())
    }
}

/// Weighted reciprocal-rank fusion.
///
/// `score(d) = Σ w / (c + rank(d))` over the lists containing `d`, ranks
/// starting at 1. Only ranks matter; input scores are ignored. Lists with zero
/// weight are skipped, and a chunk repeated inside one list counts at its
/// first position. Output is sorted by fused score, ties by chunk id.
pub fn fuse<F: Scalar, S>(ranked_lists: &[(F, Vec<RetrievalResult<S>>)], c: F) -> Vec<RetrievalResult<F>> {
    let mut scores: HashMap<&str, (F, &str)> = HashMap::new();
    for (weight, list) in ranked_lists {
        if *weight == F::zero() {
            continue;
        }
        let mut seen = HashSet::new();
        for (position, result) in list.iter().enumerate() {
            if !seen.insert(result.chunk_id.as_str()) {
                continue;
            }
            let contribution = *weight / (c + F::of(position + 1));
            let entry = scores.entry(&result.chunk_id).or_insert((F::zero(), &result.source_query));
            entry.0 = entry.0 + contribution;
        }
    }
    let mut fused: Vec<RetrievalResult<F>> = scores
        .into_iter()
        .map(|(id, (score, query))| RetrievalResult::new(id, score, Provenance::Fused).with_source_query(query))
        .collect();
    fused.sort_by(|a, b| cmp_desc(a.score, b.score).then_with(|| a.chunk_id.cmp(&b.chunk_id)));
    fused
}

const EXPANSION_SYSTEM: &str = "You rewrite search queries for a medical document retriever. \
Vous reformulez des requêtes de recherche pour un moteur documentaire médical.";

/// Prompt asking for `n` reformulations, one per line.
pub fn expansion_prompt(question: &str, n: usize) -> String {
    format!(
        "Produce {n} alternative phrasings of the question below, one per line, in the same language as the question. \
Output only the phrasings, without numbering or commentary.\n\nQuestion: {question}"
    )
}

fn strip_list_marker(line: &str) -> &str {
    static MARKER: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    let re = MARKER.get_or_init(|| Regex::new(r"^\s*(?:[-*•]+|\(?\d+[.):]|\d+\s*-)\s*").expect("static regex"));
    match re.find(line) {
        Some(m) => &line[m.end()..],
        None => line,
    }
}

/// Original question first, then up to `n` distinct reformulations.
pub fn expand_query(question: &str, llm: &dyn LanguageProvider, n: usize) -> Result<Vec<String>, RetrieveError> {
    let question = question.trim();
    if question.is_empty() {
        return Err(RetrieveError::EmptyQuestion);
    }
    let mut queries = vec![question.to_string()];
    if n == 0 {
        return Ok(queries);
    }
    let output = llm.generate(EXPANSION_SYSTEM, &expansion_prompt(question, n)).map_err(RetrieveError::Expansion)?;
    let mut seen: HashSet<String> = HashSet::from([question.to_lowercase()]);
    for line in output.lines() {
        let candidate = strip_list_marker(line).trim();
        if candidate.is_empty() {
            continue;
        }
        if seen.insert(candidate.to_lowercase()) {
            queries.push(candidate.to_string());
            if queries.len() > n {
                break;
            }
        }
    }
    Ok(queries)
}

/// [`expand_query`] with failures degraded to the bare question. The second
/// element describes the failure when degradation happened.
pub fn expand_query_or_fallback(question: &str, llm: &dyn LanguageProvider, n: usize) -> (Vec<String>, Option<String>) {
    match expand_query(question, llm, n) {
        Ok(queries) => (queries, None),
        Err(e) => {
            log::warn!("query expansion degraded: {e}");
            (vec![question.trim().to_string()], Some(e.to_string()))
        }
    }
}

/// Chunks plus their dense and sparse indexes and the embedder used for queries.
#[derive(Clone)]
pub struct HybridIndex {
    chunks: Vec<Chunk>,
    positions: HashMap<String, usize>,
    collection: VectorCollection<f32>,
    bm25: Bm25Index<f64>,
    embedder: Arc<dyn EmbeddingProvider>,
}

impl std::fmt::Debug for HybridIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HybridIndex")
            .field("chunks", &self.chunks.len())
            .field("collection", &self.collection.name())
            .field("dimension", &self.collection.dimension())
            .finish()
    }
}

impl HybridIndex {
    /// Assemble from a prebuilt (typically persisted) collection; the BM25
    /// index is rebuilt from the chunks.
    pub fn new(
        chunks: Vec<Chunk>,
        collection: VectorCollection<f32>,
        bm25_params: Bm25Params<f64>,
        embedder: Arc<dyn EmbeddingProvider>,
    ) -> Result<Self, IndexError> {
        if collection.dimension() != embedder.dimension() {
            return Err(IndexError::Dimension { expected: collection.dimension(), actual: embedder.dimension() });
        }
        let bm25 = Bm25Index::from_chunks(&chunks, bm25_params)?;
        let mut positions = HashMap::with_capacity(chunks.len());
        for (i, chunk) in chunks.iter().enumerate() {
            if positions.insert(chunk.id().to_string(), i).is_some() {
                return Err(IndexError::DuplicateId(chunk.id().to_string()));
            }
        }
        Ok(Self { chunks, positions, collection, bm25, embedder })
    }

    /// Embed and index `chunks` from scratch.
    pub fn build(
        name: &str,
        chunks: Vec<Chunk>,
        bm25_params: Bm25Params<f64>,
        embedder: Arc<dyn EmbeddingProvider>,
    ) -> Result<Self, IndexError> {
        let report = embed_chunks::<f32>(&chunks, embedder.as_ref())?;
        let collection = VectorCollection::from_records(name, embedder.dimension(), report.records)?;
        Self::new(chunks, collection, bm25_params, embedder)
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn chunk(&self, chunk_id: &str) -> Option<&Chunk> {
        self.positions.get(chunk_id).map(|&i| &self.chunks[i])
    }

    pub fn collection(&self) -> &VectorCollection<f32> {
        &self.collection
    }

    pub fn bm25(&self) -> &Bm25Index<f64> {
        &self.bm25
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn embedder(&self) -> &Arc<dyn EmbeddingProvider> {
        &self.embedder
    }

    /// A scoped index over the chunks accepted by `keep`, reusing their stored vectors.
    pub fn subset(&self, name: &str, keep: impl Fn(&Chunk) -> bool) -> Result<Self, IndexError> {
        let chunks: Vec<Chunk> = self.chunks.iter().filter(|c| keep(c)).cloned().collect();
        let records = chunks.iter().filter_map(|c| self.collection.get(c.id()).cloned()).collect();
        let collection = VectorCollection::from_records(name, self.collection.dimension(), records)?;
        Self::new(chunks, collection, self.bm25.params(), Arc::clone(&self.embedder))
    }

    pub fn embed_query(&self, query: &str) -> Result<Vec<f32>, IndexError> {
        let raw = self
            .embedder
            .embed(&[query.to_string()], EmbeddingKind::Query)
            .map_err(IndexError::QueryEmbedding)?
            .into_iter()
            .next()
            .ok_or_else(|| IndexError::QueryEmbedding(ProviderError::InvalidResponse("no vector returned".into())))?;
        Ok(normalize::<f32>(&raw))
    }

    /// Dense and sparse result lists for one query.
    pub fn search_both(
        &self,
        query: &str,
        dense_k: usize,
        sparse_k: usize,
    ) -> Result<(Vec<RetrievalResult<f64>>, Vec<RetrievalResult<f64>>), IndexError> {
        let vector = self.embed_query(query)?;
        let dense = self
            .collection
            .dense_search(&vector, dense_k)?
            .into_iter()
            .map(|r| r.cast::<f64>().with_source_query(query))
            .collect();
        let sparse = match self.bm25.search(query, sparse_k) {
            Ok(results) => results.into_iter().map(|r| r.with_source_query(query)).collect(),
            Err(IndexError::Query(_)) => Vec::new(),
            Err(e) => return Err(e),
        };
        Ok((dense, sparse))
    }
}

/// Outcome of [`retrieve_context`].
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub bundle: ContextBundle,
    pub queries: Vec<String>,
    pub fused: Vec<RetrievalResult<f64>>,
    /// Set when query expansion failed and retrieval used the question alone.
    pub degraded: Option<String>,
}

/// Expand the question, search both indexes for every query, fuse everything
/// in one pass and resolve the top chunks into a context bundle.
pub fn retrieve_context(
    question: &str,
    index: &HybridIndex,
    config: &EnsembleConfig,
    llm: &dyn LanguageProvider,
) -> Result<Retrieval, RetrieveError> {
    config.validate()?;
    if question.trim().is_empty() {
        return Err(RetrieveError::EmptyQuestion);
    }
    if index.is_empty() {
        return Ok(Retrieval {
            bundle: ContextBundle::empty(question),
            queries: vec![question.trim().to_string()],
            fused: Vec::new(),
            degraded: None,
        });
    }
    let (queries, degraded) = expand_query_or_fallback(question, llm, config.expansion_count);
    let (w_dense, w_sparse) = config.weights;
    let mut lists = Vec::with_capacity(queries.len() * 2);
    for query in &queries {
        let (dense, sparse) = index.search_both(query, config.dense_k, config.sparse_k)?;
        lists.push((w_dense, dense));
        lists.push((w_sparse, sparse));
    }
    let mut fused = fuse(&lists, config.rrf_constant);
    fused.truncate(config.final_top_n);

    let mut bundle = ContextBundle::empty(question);
    for result in &fused {
        let Some(chunk) = index.chunk(&result.chunk_id) else { continue };
        let meta = chunk.metadata();
        bundle.chunks.push(ContextChunk {
            chunk_id: chunk.id().to_string(),
            filename: meta.filename.clone(),
            page: meta.page,
            text: chunk.full_text(),
        });
        if let Some(html) = chunk.html() {
            bundle.tables.push(ContextTable { chunk_id: chunk.id().to_string(), html: html.to_string() });
        }
    }
    Ok(Retrieval { bundle, queries, fused, degraded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CompositeChunk, ElementMetadata};
    use crate::provider::{MockEmbeddingProvider, ScriptedLanguageProvider};

    fn rr(id: &str) -> RetrievalResult<f64> {
        RetrievalResult::new(id, 1.0, Provenance::Dense)
    }

    fn ids<F>(results: &[RetrievalResult<F>]) -> Vec<&str> {
        results.iter().map(|r| r.chunk_id.as_str()).collect()
    }

    #[test]
    fn hand_derived_fusion_example() {
        let dense = vec![rr("A"), rr("B"), rr("C")];
        let sparse = vec![rr("B"), rr("D")];
        let fused = fuse(&[(0.5_f64, dense), (0.5, sparse)], 60.0);
        assert_eq!(ids(&fused), vec!["B", "A", "D", "C"]);
        let expected = [0.5 / 61.0 + 0.5 / 62.0, 0.5 / 61.0, 0.5 / 62.0, 0.5 / 63.0];
        for (r, e) in fused.iter().zip(expected) {
            assert!((r.score - e).abs() < 1e-15);
            assert_eq!(r.provenance, Provenance::Fused);
        }
    }

    #[test]
    fn fusion_with_one_empty_list_keeps_order() {
        let fused = fuse(&[(0.5_f64, vec![rr("x"), rr("a"), rr("m")]), (0.5, vec![])], 60.0);
        assert_eq!(ids(&fused), vec!["x", "a", "m"]);
        assert!((fused[0].score - 0.5 / 61.0).abs() < 1e-15);
    }

    #[test]
    fn identical_lists_keep_order() {
        let list = vec![rr("z"), rr("y"), rr("x")];
        let fused = fuse(&[(0.5, list.clone()), (0.5, list)], 60.0);
        assert_eq!(ids(&fused), vec!["z", "y", "x"]);
    }

    #[test]
    fn repeated_entry_counts_once_per_list() {
        let fused = fuse(&[(1.0_f64, vec![rr("a"), rr("b"), rr("a")])], 0.0);
        assert_eq!(fused[0].score, 1.0);
        assert_eq!(fused[1].score, 0.5);
    }

    #[test]
    fn fusion_is_generic_over_scalars() {
        let fused: Vec<RetrievalResult<f32>> = fuse(&[(1.0_f32, vec![rr("a")])], 60.0);
        assert_eq!(fused[0].score, 1.0 / 61.0);
    }

    #[test]
    fn expansion_returns_original_first() {
        let llm = ScriptedLanguageProvider::new("1. rattrapage vaccinal\n2) calendrier de rattrapage\n- retard de vaccination");
        let queries = expand_query("règle du rattrapage", &llm, 3).unwrap();
        assert_eq!(
            queries,
            vec!["règle du rattrapage", "rattrapage vaccinal", "calendrier de rattrapage", "retard de vaccination"]
        );
    }

    #[test]
    fn expansion_deduplicates_case_insensitively() {
        let llm = ScriptedLanguageProvider::new("Règle du rattrapage\n\nautre formulation\nAUTRE formulation");
        let queries = expand_query("règle du rattrapage", &llm, 3).unwrap();
        assert_eq!(queries, vec!["règle du rattrapage", "autre formulation"]);
    }

    #[test]
    fn expansion_respects_limit_and_zero() {
        let llm = ScriptedLanguageProvider::new("a\nb\nc\nd");
        assert_eq!(expand_query("q", &llm, 2).unwrap(), vec!["q", "a", "b"]);
        assert_eq!(expand_query("q", &llm, 0).unwrap(), vec!["q"]);
        assert_eq!(llm.call_count(), 1);
    }

    #[test]
    fn expansion_failure_degrades() {
        let llm = ScriptedLanguageProvider::new("").fail_on_pattern(".", "timeout");
        assert!(matches!(expand_query("q", &llm, 3), Err(RetrieveError::Expansion(_))));
        let (queries, degraded) = expand_query_or_fallback("q", &llm, 3);
        assert_eq!(queries, vec!["q"]);
        assert!(degraded.unwrap().contains("timeout"));
    }

    fn chunk(id: &str, text: &str) -> Chunk {
        Chunk::CompositeElement(CompositeChunk {
            element_id: id.into(),
            text: text.into(),
            element_ids: vec![id.into()],
            metadata: ElementMetadata::new("guide.pdf"),
        })
    }

    #[test]
    fn empty_index_gives_empty_bundle() {
        let index = HybridIndex::build("e", vec![], Bm25Params::default(), Arc::new(MockEmbeddingProvider::default())).unwrap();
        let llm = ScriptedLanguageProvider::new("x");
        let r = retrieve_context("question", &index, &EnsembleConfig::default(), &llm).unwrap();
        assert!(r.bundle.chunks.is_empty());
        assert!(r.bundle.tables.is_empty());
        assert_eq!(llm.call_count(), 0);
    }

    #[test]
    fn bundle_is_bounded_and_deterministic() {
        let chunks: Vec<Chunk> = (0..20).map(|i| chunk(&format!("c{i:02}"), &format!("vaccin dose {i} rappel"))).collect();
        let index = HybridIndex::build("d", chunks, Bm25Params::default(), Arc::new(MockEmbeddingProvider::default())).unwrap();
        let llm = ScriptedLanguageProvider::new("dose de rappel\nrappel vaccinal");
        let config = EnsembleConfig::default();
        let a = retrieve_context("vaccin rappel", &index, &config, &llm).unwrap();
        let b = retrieve_context("vaccin rappel", &index, &config, &llm).unwrap();
        assert!(a.bundle.chunks.len() <= config.final_top_n);
        assert_eq!(a, b);
        assert_eq!(a.queries.len(), 3);
    }

    #[test]
    fn config_validation() {
        let mut c = EnsembleConfig::default();
        assert!(c.validate().is_ok());
        c.weights = (0.0, 0.0);
        assert!(c.validate().is_err());
        c.weights = (-1.0, 2.0);
        assert!(c.validate().is_err());
        c = EnsembleConfig { dense_k: 0, ..EnsembleConfig::default() };
        assert!(c.validate().is_err());
    }
}
