//! Parsed-document ingestion: element loading, boilerplate removal, title-based
//! chunking, table enrichment and the `chunks.json` file format.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::provider::{LanguageProvider, ProviderError};

/// Separator placed between constituent texts of a composite chunk.
pub const DEFAULT_SEPARATOR: &str = "\n\n";

/// Version string written to and required from chunk files.
pub const CHUNKS_FORMAT_VERSION: &str = "1";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("malformed JSON at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("entry {index}: {message} (field `{field}`)")]
    Schema { index: usize, field: String, message: String },
    #[error("duplicate element_id `{0}`")]
    DuplicateId(String),
    #[error("unmatched cleaning delimiter: title `{title}` (element `{element_id}`) has no closing `{end}`")]
    UnmatchedDelimiter { element_id: String, title: String, end: String },
    #[error("invalid cleaning spec: {0}")]
    InvalidSpec(String),
    #[error("table enrichment failed for `{element_id}`: {source}")]
    Enrichment { element_id: String, source: ProviderError },
    #[error("storage error: {0}")]
    Storage(#[from] std::io::Error),
    #[error("chunk file format error: {0}")]
    Format(String),
}

/// Element category as reported by the upstream parser.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ElementKind {
    Title,
    NarrativeText,
    Table,
    UncategorizedText,
    Other(String),
}

impl ElementKind {
    pub fn label(&self) -> &str {
        match self {
            ElementKind::Title => "Title",
            ElementKind::NarrativeText => "NarrativeText",
            ElementKind::Table => "Table",
            ElementKind::UncategorizedText => "UncategorizedText",
            ElementKind::Other(label) => label,
        }
    }
}

impl From<&str> for ElementKind {
    fn from(label: &str) -> Self {
        match label {
            "Title" => ElementKind::Title,
            "NarrativeText" => ElementKind::NarrativeText,
            "Table" => ElementKind::Table,
            "UncategorizedText" => ElementKind::UncategorizedText,
            other => ElementKind::Other(other.to_string()),
        }
    }
}

impl From<String> for ElementKind {
    fn from(label: String) -> Self {
        ElementKind::from(label.as_str())
    }
}

impl From<ElementKind> for String {
    fn from(kind: ElementKind) -> Self {
        kind.label().to_string()
    }
}

impl fmt::Display for ElementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl Serialize for ElementKind {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for ElementKind {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer).map(ElementKind::from)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementMetadata {
    pub filename: String,
    #[serde(default)]
    pub filetype: String,
    #[serde(default, rename = "page_number", skip_serializing_if = "Option::is_none")]
    pub page: Option<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub languages: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_as_html: Option<String>,
}

impl ElementMetadata {
    pub fn new(filename: impl Into<String>) -> Self {
        Self {
            filename: filename.into(),
            filetype: String::new(),
            page: None,
            languages: Vec::new(),
            text_as_html: None,
        }
    }
}

/// One parsed unit of a source document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentElement {
    pub element_id: String,
    #[serde(rename = "type")]
    pub kind: ElementKind,
    pub text: String,
    pub metadata: ElementMetadata,
}

impl DocumentElement {
    pub fn new(element_id: impl Into<String>, kind: ElementKind, text: impl Into<String>, metadata: ElementMetadata) -> Self {
        Self { element_id: element_id.into(), kind, text: text.into(), metadata }
    }
}

fn byte_offset(input: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, l) in input.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(input.len());
        }
        offset += l.len() + 1;
    }
    input.len()
}

fn required_str<'a>(entry: &'a Value, index: usize, path: &[&str]) -> Result<&'a str, CorpusError> {
    let field = path.join(".");
    let mut cur = entry;
    for key in path {
        cur = cur.get(*key).ok_or_else(|| CorpusError::Schema {
            index,
            field: field.clone(),
            message: "missing required field".into(),
        })?;
    }
    cur.as_str().ok_or_else(|| CorpusError::Schema { index, field, message: "expected a string".into() })
}

/// Read an element-array JSON document as produced by the upstream parser.
pub fn load_elements<R: Read>(mut source: R) -> Result<Vec<DocumentElement>, CorpusError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let value: Value = serde_json::from_slice(&bytes).map_err(|e| CorpusError::Parse {
        offset: byte_offset(&bytes, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let entries = value.as_array().ok_or(CorpusError::Parse {
        offset: 0,
        message: "top-level value is not an array".into(),
    })?;

    let mut seen = HashSet::new();
    let mut elements = Vec::with_capacity(entries.len());
    for (index, entry) in entries.iter().enumerate() {
        let element_id = required_str(entry, index, &["element_id"])?.to_string();
        let kind = ElementKind::from(required_str(entry, index, &["type"])?);
        let text = required_str(entry, index, &["text"])?.to_string();
        let filename = required_str(entry, index, &["metadata", "filename"])?;
        if filename.is_empty() {
            return Err(CorpusError::Schema {
                index,
                field: "metadata.filename".into(),
                message: "must be non-empty".into(),
            });
        }
        let metadata: ElementMetadata =
            serde_json::from_value(entry["metadata"].clone()).map_err(|e| CorpusError::Schema {
                index,
                field: "metadata".into(),
                message: e.to_string(),
            })?;
        if kind == ElementKind::Table && metadata.text_as_html.as_deref().is_none_or(str::is_empty) {
            return Err(CorpusError::Schema {
                index,
                field: "metadata.text_as_html".into(),
                message: "table elements require a non-empty HTML rendering".into(),
            });
        }
        if !seen.insert(element_id.clone()) {
            return Err(CorpusError::DuplicateId(element_id));
        }
        elements.push(DocumentElement { element_id, kind, text, metadata });
    }
    Ok(elements)
}

/// Write elements back in the element-array format accepted by [`load_elements`].
pub fn save_elements<W: Write>(elements: &[DocumentElement], mut sink: W) -> Result<(), CorpusError> {
    serde_json::to_writer_pretty(&mut sink, elements).map_err(|e| CorpusError::Storage(e.into()))?;
    sink.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Cleaning

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningSpec {
    /// `(start title, end title)`; both boundary titles are removed with the span.
    #[serde(default)]
    pub delimiter_pairs: Vec<(String, String)>,
    #[serde(default)]
    pub drop_kinds: Vec<ElementKind>,
}

impl CleaningSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        for (start, end) in &self.delimiter_pairs {
            if start.trim() == end.trim() {
                return Err(CorpusError::InvalidSpec(format!("start and end titles are identical: `{start}`")));
            }
        }
        Ok(())
    }
}

/// Remove delimited boilerplate spans and unconditionally dropped kinds.
///
/// Title texts are compared after trimming surrounding whitespace.
pub fn clean_elements(elements: Vec<DocumentElement>, spec: &CleaningSpec) -> Result<Vec<DocumentElement>, CorpusError> {
    spec.validate()?;
    let mut kept = Vec::with_capacity(elements.len());
    // (end title, opening element id, opening title)
    let mut open: Option<(&str, String, String)> = None;
    for element in elements {
        let is_title = element.kind == ElementKind::Title;
        if let Some((end, _, _)) = &open {
            if is_title && element.text.trim() == end.trim() {
                open = None;
            }
            continue;
        }
        if is_title {
            let title = element.text.trim();
            if let Some((_, end)) = spec.delimiter_pairs.iter().find(|(start, _)| start.trim() == title) {
                open = Some((end.as_str(), element.element_id.clone(), element.text.clone()));
                continue;
            }
        }
        if spec.drop_kinds.contains(&element.kind) {
            continue;
        }
        kept.push(element);
    }
    if let Some((end, element_id, title)) = open {
        return Err(CorpusError::UnmatchedDelimiter { element_id, title, end: end.to_string() });
    }
    Ok(kept)
}

// ---------------------------------------------------------------------------
// Chunks

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChunkVariant {
    CompositeElement,
    TableElement,
}

/// Title-grouped narrative text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositeChunk {
    pub element_id: String,
    pub text: String,
    pub element_ids: Vec<String>,
    pub metadata: ElementMetadata,
}

/// A table kept apart from the narrative flow.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableChunk {
    pub element_id: String,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ai_description: Option<String>,
    pub html: String,
    pub metadata: ElementMetadata,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "variant")]
pub enum Chunk {
    CompositeElement(CompositeChunk),
    TableElement(TableChunk),
}

impl Chunk {
    pub fn id(&self) -> &str {
        match self {
            Chunk::CompositeElement(c) => &c.element_id,
            Chunk::TableElement(t) => &t.element_id,
        }
    }

    pub fn metadata(&self) -> &ElementMetadata {
        match self {
            Chunk::CompositeElement(c) => &c.metadata,
            Chunk::TableElement(t) => &t.metadata,
        }
    }

    pub fn variant(&self) -> ChunkVariant {
        match self {
            Chunk::CompositeElement(_) => ChunkVariant::CompositeElement,
            Chunk::TableElement(_) => ChunkVariant::TableElement,
        }
    }

    pub fn html(&self) -> Option<&str> {
        match self {
            Chunk::CompositeElement(_) => None,
            Chunk::TableElement(t) => Some(&t.html),
        }
    }

    /// Text used for embedding, lexical indexing, prompting and citation.
    /// Tables contribute their content followed by the description when present.
    pub fn full_text(&self) -> String {
        match self {
            Chunk::CompositeElement(c) => c.text.clone(),
            Chunk::TableElement(t) => match &t.ai_description {
                Some(d) if !d.trim().is_empty() => format!("{}{DEFAULT_SEPARATOR}{d}", t.content),
                _ => t.content.clone(),
            },
        }
    }
}

fn chunk_id(prefix: &str, filename: &str, element_ids: &[&str]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(filename.as_bytes());
    for id in element_ids {
        hasher.update([0u8]);
        hasher.update(id.as_bytes());
    }
    format!("{prefix}-{}", &hex::encode(hasher.finalize())[..16])
}

struct OpenComposite<'a> {
    members: Vec<&'a DocumentElement>,
    tables: Vec<&'a DocumentElement>,
}

impl OpenComposite<'_> {
    fn flush(self, separator: &str, out: &mut Vec<Chunk>) {
        if let Some(first) = self.members.first() {
            let ids: Vec<&str> = self.members.iter().map(|e| e.element_id.as_str()).collect();
            let text = self.members.iter().map(|e| e.text.as_str()).collect::<Vec<_>>().join(separator);
            out.push(Chunk::CompositeElement(CompositeChunk {
                element_id: chunk_id("comp", &first.metadata.filename, &ids),
                text,
                element_ids: ids.into_iter().map(str::to_string).collect(),
                metadata: first.metadata.clone(),
            }));
        }
        for table in self.tables {
            out.push(Chunk::TableElement(TableChunk {
                element_id: chunk_id("tab", &table.metadata.filename, &[&table.element_id]),
                content: table.text.clone(),
                ai_description: None,
                html: table.metadata.text_as_html.clone().unwrap_or_default(),
                metadata: table.metadata.clone(),
            }));
        }
    }
}

/// Group elements under their preceding title.
///
/// Each title opens a composite chunk that collects the following non-table
/// elements. Tables encountered inside a section become separate table chunks
/// emitted right after the section's composite. Elements before the first
/// title form a headerless composite.
pub fn chunk_by_title(elements: &[DocumentElement], separator: &str) -> Vec<Chunk> {
    let mut out = Vec::new();
    let mut current = OpenComposite { members: Vec::new(), tables: Vec::new() };
    for element in elements {
        match element.kind {
            ElementKind::Title => {
                let previous = std::mem::replace(&mut current, OpenComposite { members: vec![element], tables: Vec::new() });
                previous.flush(separator, &mut out);
            }
            ElementKind::Table => current.tables.push(element),
            _ => current.members.push(element),
        }
    }
    current.flush(separator, &mut out);
    out
}

const TABLE_DESCRIPTION_SYSTEM: &str = "Vous êtes un assistant de documentation médicale. \
Rédigez en français une description concise (deux à trois phrases) du tableau fourni : \
son objet, ses colonnes et les informations clés qu'il contient. N'inventez rien.";

/// Attach a generated French description to a table chunk.
pub fn enrich_table(table: &TableChunk, llm: &dyn LanguageProvider) -> Result<TableChunk, CorpusError> {
    let user = format!("Tableau (HTML) :\n{}\n\nContenu texte :\n{}", table.html, table.content);
    let description = llm
        .generate(TABLE_DESCRIPTION_SYSTEM, &user)
        .map_err(|source| CorpusError::Enrichment { element_id: table.element_id.clone(), source })?;
    Ok(TableChunk { ai_description: Some(description.trim().to_string()), ..table.clone() })
}

/// Enrich every table chunk in place; failures leave the table undescribed and
/// are returned for reporting.
pub fn enrich_tables(chunks: &mut [Chunk], llm: &dyn LanguageProvider) -> Vec<CorpusError> {
    let mut failures = Vec::new();
    for chunk in chunks.iter_mut() {
        if let Chunk::TableElement(table) = chunk {
            match enrich_table(table, llm) {
                Ok(enriched) => *table = enriched,
                Err(e) => failures.push(e),
            }
        }
    }
    failures
}

#[derive(Serialize)]
struct ChunkFileOut<'a> {
    version: &'a str,
    chunks: &'a [Chunk],
}

#[derive(Deserialize)]
struct ChunkFileIn {
    chunks: Vec<Chunk>,
}

pub fn save_chunks<W: Write>(chunks: &[Chunk], mut sink: W) -> Result<(), CorpusError> {
    serde_json::to_writer_pretty(&mut sink, &ChunkFileOut { version: CHUNKS_FORMAT_VERSION, chunks })
        .map_err(|e| CorpusError::Storage(e.into()))?;
    sink.flush()?;
    Ok(())
}

pub fn load_chunks<R: Read>(source: R) -> Result<Vec<Chunk>, CorpusError> {
    let value: Value = serde_json::from_reader(source).map_err(|e| {
        if e.is_io() {
            CorpusError::Storage(e.into())
        } else {
            CorpusError::Format(e.to_string())
        }
    })?;
    match value.get("version") {
        Some(Value::String(v)) if v == CHUNKS_FORMAT_VERSION => {}
        Some(other) => return Err(CorpusError::Format(format!("unsupported version {other}"))),
        None => return Err(CorpusError::Format("missing version field".into())),
    }
    let file: ChunkFileIn = serde_json::from_value(value).map_err(|e| CorpusError::Format(e.to_string()))?;
    Ok(file.chunks)
}
