//! Retrieval-augmented question answering over parsed guideline documents.
//!
//! The pipeline runs element ingestion and cleaning ([`corpus`]), dense and
//! BM25 indexing ([`index`]), hybrid retrieval with rank fusion
//! ([`retrieve`]), grounded generation with citations ([`answer`]) and an
//! agentic tool-selection loop ([`agent`]). [`benchmark`] generates QA
//! datasets from chunks and [`eval`] computes the reporting metrics.
//! [`engine`] wires everything behind a single `ask` call per answer mode.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix the types
//! used by the default pipeline.

pub mod agent;
pub mod answer;
pub mod benchmark;
pub mod corpus;
pub mod engine;
pub mod eval;
pub mod index;
pub mod provider;
pub mod retrieve;
pub mod scalar;

pub use scalar::Scalar;

/// Vector store used by the pipeline (single-precision, matching the on-disk format).
pub type VectorCollection = index::VectorCollection<f32>;
/// Vector record used by the pipeline.
pub type VectorRecord = index::VectorRecord<f32>;
/// BM25 index used by the pipeline.
pub type Bm25Index = index::Bm25Index<f64>;
/// BM25 parameters used by the pipeline.
pub type Bm25Params = index::Bm25Params<f64>;
/// Retrieval result after fusion.
pub type RetrievalResult = retrieve::RetrievalResult<f64>;
