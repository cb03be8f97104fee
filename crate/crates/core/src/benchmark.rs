//! Automated question generation: three Bloom-tiered QA items per chunk,
//! collected into a versioned JSON dataset.

use std::collections::{BTreeSet, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::Chunk;
use crate::provider::{LanguageProvider, ProviderError};

pub const DATASET_FORMAT_VERSION: &str = "1";
pub const DEFAULT_LANGUAGE: &str = "fr";

#[derive(Debug, thiserror::Error)]
pub enum BenchmarkError {
    #[error("chunk `{0}` has no text")]
    EmptyChunk(String),
    #[error("generation failed for chunk `{chunk_id}`: {source}")]
    Provider { chunk_id: String, source: ProviderError },
    #[error("no parseable question in the reply for chunk `{0}`")]
    Unparseable(String),
    #[error("no chunks to generate from")]
    NoChunks,
    #[error("malformed dataset JSON: {0}")]
    Parse(String),
    #[error("unsupported dataset version `{0}`")]
    Version(String),
    #[error("dataset is missing `{0}`")]
    MissingField(&'static str),
    #[error("item {index}: {message}")]
    ItemAt { index: usize, message: String },
    #[error("item `{item_id}`: {message}")]
    Item { item_id: String, message: String },
    #[error("duplicate item id `{0}`")]
    DuplicateItem(String),
    #[error("item `{item_id}` references unknown chunk `{chunk_id}`")]
    UnresolvedChunk { item_id: String, chunk_id: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QuestionType {
    Factual,
    Conceptual,
    Applied,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl QuestionType {
    pub const ALL: [QuestionType; 3] = [QuestionType::Factual, QuestionType::Conceptual, QuestionType::Applied];

    pub fn difficulty(self) -> Difficulty {
        match self {
            QuestionType::Factual => Difficulty::Easy,
            QuestionType::Conceptual => Difficulty::Medium,
            QuestionType::Applied => Difficulty::Hard,
        }
    }

    fn slug(self) -> &'static str {
        match self {
            QuestionType::Factual => "factual",
            QuestionType::Conceptual => "conceptual",
            QuestionType::Applied => "applied",
        }
    }

    /// Accepts the English names and their French equivalents.
    pub fn parse(label: &str) -> Option<Self> {
        let label = label.trim().trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
        match label.as_str() {
            "factual" | "factuel" | "factuelle" => Some(QuestionType::Factual),
            "conceptual" | "conceptuel" | "conceptuelle" => Some(QuestionType::Conceptual),
            "applied" | "appliqué" | "appliquée" | "applique" | "appliquee" => Some(QuestionType::Applied),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkItem {
    pub item_id: String,
    pub question: String,
    pub reference_answer: String,
    pub qtype: QuestionType,
    pub difficulty: Difficulty,
    pub source_chunk_id: String,
    pub filename: String,
    #[serde(default)]
    pub page: Option<u32>,
    pub language: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub filename: String,
    pub chunk_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Upper bound on concurrent provider calls.
    pub concurrency: usize,
    pub default_language: String,
    /// Filled with the provider name when a dataset is generated.
    pub provider: String,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { concurrency: 4, default_language: DEFAULT_LANGUAGE.to_string(), provider: String::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkDataset {
    pub version: String,
    pub generator_config: GeneratorConfig,
    pub manifest: Vec<ManifestEntry>,
    pub items: Vec<BenchmarkItem>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub chunk_id: String,
    pub message: String,
}

/// Items generated plus everything that was dropped along the way.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GenerationReport {
    pub entries: Vec<ReportEntry>,
}

const GENERATION_SYSTEM: &str = "Vous êtes un expert en vaccination qui rédige des questions d'évaluation \
à partir d'un extrait de guide médical. You write assessment questions grounded only in the excerpt.";

fn generation_prompt(text: &str) -> String {
    format!(
        "Rédigez exactement trois questions sur l'extrait ci-dessous, avec leur réponse de référence :\n\
         - une question Factual (rappel direct d'une information),\n\
         - une question Conceptual (compréhension des principes),\n\
         - une question Applied (mise en pratique dans un cas clinique).\n\n\
         Format de chaque bloc, blocs séparés par une ligne `---` :\n\
         Q: <question>\nA: <réponse>\nTYPE: <Factual|Conceptual|Applied>\n\n\
         Extrait :\n{text}"
    )
}

struct Triple {
    question: String,
    answer: String,
    qtype: QuestionType,
}

fn parse_block(block: &str) -> Result<Triple, String> {
    let (mut q, mut a, mut t): (Option<String>, Option<String>, Option<String>) = (None, None, None);
    let mut current: Option<&mut Option<String>> = None;
    for line in block.lines() {
        let trimmed = line.trim();
        let upper = trimmed.to_uppercase();
        if let Some(rest) = upper.strip_prefix("Q:").map(|_| &trimmed[2..]) {
            q = Some(rest.trim().to_string());
            current = Some(&mut q);
        } else if let Some(rest) = upper.strip_prefix("A:").map(|_| &trimmed[2..]) {
            a = Some(rest.trim().to_string());
            current = Some(&mut a);
        } else if let Some(rest) = upper.strip_prefix("TYPE:").map(|_| &trimmed[5..]) {
            t = Some(rest.trim().to_string());
            current = None;
        } else if let Some(Some(field)) = current.as_deref_mut() {
            if !trimmed.is_empty() {
                field.push('\n');
                field.push_str(trimmed);
            }
        }
    }
    let question = q.filter(|s| !s.is_empty()).ok_or("missing Q:")?;
    let answer = a.filter(|s| !s.is_empty()).ok_or("missing A:")?;
    let label = t.ok_or("missing TYPE:")?;
    let qtype = QuestionType::parse(&label).ok_or_else(|| format!("unknown TYPE `{label}`"))?;
    Ok(Triple { question, answer, qtype })
}

/// Split a reply into blocks on `---` lines.
fn split_blocks(reply: &str) -> Vec<String> {
    let mut blocks = vec![String::new()];
    for line in reply.lines() {
        if line.trim().len() >= 3 && line.trim().chars().all(|c| c == '-') {
            blocks.push(String::new());
        } else {
            let last = blocks.last_mut().expect("non-empty");
            last.push_str(line);
            last.push('\n');
        }
    }
    blocks.into_iter().filter(|b| !b.trim().is_empty()).collect()
}

fn chunk_language(chunk: &Chunk, default: &str) -> String {
    chunk.metadata().languages.first().cloned().unwrap_or_else(|| default.to_string())
}

/// One provider call; at most one item per question type, in type order.
pub fn generate_for_chunk(
    chunk: &Chunk,
    llm: &dyn LanguageProvider,
) -> Result<(Vec<BenchmarkItem>, GenerationReport), BenchmarkError> {
    generate_with_language(chunk, llm, DEFAULT_LANGUAGE)
}

fn generate_with_language(
    chunk: &Chunk,
    llm: &dyn LanguageProvider,
    default_language: &str,
) -> Result<(Vec<BenchmarkItem>, GenerationReport), BenchmarkError> {
    let text = chunk.full_text();
    let chunk_id = chunk.id().to_string();
    if text.trim().is_empty() {
        return Err(BenchmarkError::EmptyChunk(chunk_id));
    }
    let reply = llm
        .generate(GENERATION_SYSTEM, &generation_prompt(&text))
        .map_err(|source| BenchmarkError::Provider { chunk_id: chunk_id.clone(), source })?;

    let mut report = GenerationReport::default();
    let mut by_type: Vec<Option<Triple>> = vec![None, None, None];
    for (i, block) in split_blocks(&reply).iter().enumerate() {
        match parse_block(block) {
            Ok(triple) => {
                let slot = &mut by_type[triple.qtype as usize];
                if slot.is_some() {
                    report.entries.push(ReportEntry {
                        chunk_id: chunk_id.clone(),
                        message: format!("block {}: duplicate {:?} question dropped", i + 1, triple.qtype),
                    });
                } else {
                    *slot = Some(triple);
                }
            }
            Err(message) => report.entries.push(ReportEntry { chunk_id: chunk_id.clone(), message: format!("block {}: {message}", i + 1) }),
        }
    }
    for qtype in QuestionType::ALL {
        if by_type[qtype as usize].is_none() && !report.entries.iter().any(|e| e.message.contains("block")) {
            report.entries.push(ReportEntry { chunk_id: chunk_id.clone(), message: format!("no {qtype:?} question returned") });
        }
    }

    let metadata = chunk.metadata();
    let language = chunk_language(chunk, default_language);
    let items: Vec<BenchmarkItem> = QuestionType::ALL
        .iter()
        .zip(by_type)
        .filter_map(|(&qtype, triple)| {
            triple.map(|t| BenchmarkItem {
                item_id: format!("{chunk_id}-{}", qtype.slug()),
                question: t.question,
                reference_answer: t.answer,
                qtype,
                difficulty: qtype.difficulty(),
                source_chunk_id: chunk_id.clone(),
                filename: metadata.filename.clone(),
                page: metadata.page,
                language: language.clone(),
            })
        })
        .collect();
    if items.is_empty() {
        return Err(BenchmarkError::Unparseable(chunk_id));
    }
    Ok((items, report))
}

fn manifest(chunks: &[Chunk]) -> Vec<ManifestEntry> {
    let mut entries: Vec<ManifestEntry> = Vec::new();
    for chunk in chunks {
        let filename = &chunk.metadata().filename;
        match entries.iter_mut().find(|e| &e.filename == filename) {
            Some(e) => e.chunk_count += 1,
            None => entries.push(ManifestEntry { filename: filename.clone(), chunk_count: 1 }),
        }
    }
    entries
}

/// Generate over all chunks. Failing chunks are reported and skipped.
pub fn generate_dataset(
    chunks: &[Chunk],
    llm: &dyn LanguageProvider,
    config: &GeneratorConfig,
) -> Result<(BenchmarkDataset, GenerationReport), BenchmarkError> {
    if chunks.is_empty() {
        return Err(BenchmarkError::NoChunks);
    }
    let bound = config.concurrency.max(1);
    let mut results = Vec::with_capacity(chunks.len());
    for batch in chunks.chunks(bound) {
        let batch_results: Vec<_> = std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .iter()
                .map(|chunk| scope.spawn(move || generate_with_language(chunk, llm, &config.default_language)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("generation worker panicked")).collect()
        });
        results.extend(batch_results);
    }

    let mut items = Vec::new();
    let mut report = GenerationReport::default();
    for (chunk, result) in chunks.iter().zip(results) {
        match result {
            Ok((chunk_items, chunk_report)) => {
                items.extend(chunk_items);
                report.entries.extend(chunk_report.entries);
            }
            Err(e) => report.entries.push(ReportEntry { chunk_id: chunk.id().to_string(), message: e.to_string() }),
        }
    }
    let generator_config = GeneratorConfig { provider: llm.name().to_string(), ..config.clone() };
    let dataset = BenchmarkDataset {
        version: DATASET_FORMAT_VERSION.to_string(),
        generator_config,
        manifest: manifest(chunks),
        items,
    };
    Ok((dataset, report))
}

pub fn save_dataset<W: Write>(dataset: &BenchmarkDataset, mut sink: W) -> Result<(), BenchmarkError> {
    serde_json::to_writer_pretty(&mut sink, dataset).map_err(|e| BenchmarkError::Io(e.into()))?;
    sink.write_all(b"\n")?;
    Ok(())
}

/// Load and validate. Item errors name the offending `item_id`.
pub fn load_dataset<R: Read>(source: R) -> Result<BenchmarkDataset, BenchmarkError> {
    let mut value: Value = serde_json::from_reader(source).map_err(|e| BenchmarkError::Parse(e.to_string()))?;
    let version = value.get("version").ok_or(BenchmarkError::MissingField("version"))?;
    let version = version.as_str().map(str::to_string).unwrap_or_else(|| version.to_string());
    if version != DATASET_FORMAT_VERSION {
        return Err(BenchmarkError::Version(version));
    }
    let generator_config: GeneratorConfig = match value.get_mut("generator_config") {
        Some(v) => serde_json::from_value(v.take()).map_err(|e| BenchmarkError::Parse(format!("generator_config: {e}")))?,
        None => return Err(BenchmarkError::MissingField("generator_config")),
    };
    let manifest: Vec<ManifestEntry> = match value.get_mut("manifest") {
        Some(v) => serde_json::from_value(v.take()).map_err(|e| BenchmarkError::Parse(format!("manifest: {e}")))?,
        None => return Err(BenchmarkError::MissingField("manifest")),
    };
    let raw_items = match value.get_mut("items").map(Value::take) {
        Some(Value::Array(items)) => items,
        Some(_) => return Err(BenchmarkError::Parse("items must be an array".into())),
        None => return Err(BenchmarkError::MissingField("items")),
    };

    let mut seen = HashSet::new();
    let mut items = Vec::with_capacity(raw_items.len());
    for (index, raw) in raw_items.into_iter().enumerate() {
        let item_id = match raw.get("item_id").and_then(Value::as_str) {
            Some(id) => id.to_string(),
            None => return Err(BenchmarkError::ItemAt { index, message: "missing field `item_id`".into() }),
        };
        let item: BenchmarkItem =
            serde_json::from_value(raw).map_err(|e| BenchmarkError::Item { item_id: item_id.clone(), message: e.to_string() })?;
        if item.difficulty != item.qtype.difficulty() {
            return Err(BenchmarkError::Item {
                item_id,
                message: format!("difficulty {:?} does not match qtype {:?}", item.difficulty, item.qtype),
            });
        }
        if !seen.insert(item_id.clone()) {
            return Err(BenchmarkError::DuplicateItem(item_id));
        }
        items.push(item);
    }
    Ok(BenchmarkDataset { version, generator_config, manifest, items })
}

/// Every item must point at a chunk in `chunks`.
pub fn check_references(dataset: &BenchmarkDataset, chunks: &[Chunk]) -> Result<(), BenchmarkError> {
    let ids: BTreeSet<&str> = chunks.iter().map(Chunk::id).collect();
    match dataset.items.iter().find(|i| !ids.contains(i.source_chunk_id.as_str())) {
        Some(item) => Err(BenchmarkError::UnresolvedChunk { item_id: item.item_id.clone(), chunk_id: item.source_chunk_id.clone() }),
        None => Ok(()),
    }
}
