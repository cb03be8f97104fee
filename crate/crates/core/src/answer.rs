//! Grounded generation: prompt assembly over a context bundle, table
//! rendering, and citation extraction from the model output.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::OnceLock;
use std::time::Instant;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::provider::{LanguageProvider, ProviderError};

/// Refusal sentence the model is instructed to use when context is insufficient.
pub const REFUSAL_FR: &str = "Je suis désolé, je n'ai pas pu trouver cette information.";

pub const DEFAULT_EXCERPT_CHARS: usize = 200;

#[derive(Debug, thiserror::Error)]
pub enum AnswerError {
    #[error("generation failed in {mode} mode for question `{question}`: {source}")]
    Generation { question: String, mode: AnswerMode, source: ProviderError },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TableError {
    #[error("input contains no <table> element")]
    NoTable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextChunk {
    pub chunk_id: String,
    pub filename: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub page: Option<u32>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextTable {
    pub chunk_id: String,
    pub html: String,
}

/// Retrieved material handed to the generator, in rank order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextBundle {
    pub question: String,
    pub chunks: Vec<ContextChunk>,
    pub tables: Vec<ContextTable>,
}

impl ContextBundle {
    pub fn empty(question: &str) -> Self {
        Self { question: question.to_string(), chunks: Vec::new(), tables: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerMode {
    Simple,
    Enhanced,
    Agentic,
}

impl fmt::Display for AnswerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnswerMode::Simple => "simple",
            AnswerMode::Enhanced => "enhanced",
            AnswerMode::Agentic => "agentic",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Citation {
    pub chunk_id: String,
    pub filename: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub page: Option<u32>,
    /// Verbatim prefix of the cited chunk text.
    pub excerpt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub citations: Vec<Citation>,
    pub mode: AnswerMode,
    pub latency_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnswerConfig {
    pub excerpt_chars: usize,
}

impl Default for AnswerConfig {
    fn default() -> Self {
        Self { excerpt_chars: DEFAULT_EXCERPT_CHARS }
    }
}

// ---------------------------------------------------------------------------
// HTML tables

#[derive(Debug)]
struct Cell {
    text: String,
    header: bool,
    rowspan: usize,
    colspan: usize,
}

fn decode_entities(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(amp) = rest.find('&') {
        out.push_str(&rest[..amp]);
        rest = &rest[amp..];
        let Some(semi) = rest[..rest.len().min(12)].find(';') else {
            out.push('&');
            rest = &rest[1..];
            continue;
        };
        let entity = &rest[1..semi];
        let decoded = match entity {
            "amp" => Some('&'),
            "lt" => Some('<'),
            "gt" => Some('>'),
            "quot" => Some('"'),
            "apos" => Some('\''),
            "nbsp" => Some(' '),
            _ => entity
                .strip_prefix("#x")
                .or_else(|| entity.strip_prefix("#X"))
                .and_then(|h| u32::from_str_radix(h, 16).ok())
                .or_else(|| entity.strip_prefix('#').and_then(|d| d.parse().ok()))
                .and_then(char::from_u32),
        };
        match decoded {
            Some(c) => {
                out.push(c);
                rest = &rest[semi + 1..];
            }
            None => {
                out.push('&');
                rest = &rest[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

fn span_attr(tag: &str, name: &str) -> usize {
    static ATTR: OnceLock<Regex> = OnceLock::new();
    let re = ATTR.get_or_init(|| Regex::new(r#"(?i)\b(rowspan|colspan)\s*=\s*["']?(\d+)"#).expect("static regex"));
    re.captures_iter(tag)
        .find(|c| c[1].eq_ignore_ascii_case(name))
        .and_then(|c| c[2].parse::<usize>().ok())
        .unwrap_or(1)
        .clamp(1, 1000)
}

fn tag_name(tag: &str) -> (bool, String) {
    let inner = tag.trim_start_matches('<').trim_end_matches('>').trim();
    let (closing, inner) = match inner.strip_prefix('/') {
        Some(rest) => (true, rest.trim_start()),
        None => (false, inner),
    };
    let name: String = inner.chars().take_while(|c| c.is_ascii_alphanumeric()).collect();
    (closing, name.to_ascii_lowercase())
}

fn parse_rows(html: &str) -> Result<Vec<Vec<Cell>>, TableError> {
    let lower = html.to_ascii_lowercase();
    let start = lower.find("<table").ok_or(TableError::NoTable)?;
    let end = lower[start..].find("</table").map_or(html.len(), |e| start + e);
    let body = &html[start..end];

    let mut rows: Vec<Vec<Cell>> = Vec::new();
    let mut row: Option<Vec<Cell>> = None;
    let mut cell: Option<Cell> = None;
    let close_cell = |cell: &mut Option<Cell>, row: &mut Option<Vec<Cell>>| {
        if let Some(c) = cell.take() {
            row.get_or_insert_with(Vec::new).push(c);
        }
    };

    let mut rest = body;
    while !rest.is_empty() {
        if rest.starts_with("<!--") {
            rest = rest.find("-->").map_or("", |e| &rest[e + 3..]);
            continue;
        }
        if rest.starts_with('<') {
            let Some(gt) = rest.find('>') else { break };
            let tag = &rest[..=gt];
            rest = &rest[gt + 1..];
            let (closing, name) = tag_name(tag);
            match (closing, name.as_str()) {
                (false, "tr") | (true, "tr") => {
                    close_cell(&mut cell, &mut row);
                    if let Some(r) = row.take() {
                        rows.push(r);
                    }
                    if !closing {
                        row = Some(Vec::new());
                    }
                }
                (false, "td") | (false, "th") => {
                    close_cell(&mut cell, &mut row);
                    cell = Some(Cell {
                        text: String::new(),
                        header: name == "th",
                        rowspan: span_attr(tag, "rowspan"),
                        colspan: span_attr(tag, "colspan"),
                    });
                }
                (true, "td") | (true, "th") => close_cell(&mut cell, &mut row),
                (false, "br") | (false, "p") | (true, "p") | (false, "li") => {
                    if let Some(c) = cell.as_mut() {
                        c.text.push(' ');
                    }
                }
                _ => {}
            }
            continue;
        }
        let next = rest.find('<').unwrap_or(rest.len());
        if let Some(c) = cell.as_mut() {
            c.text.push_str(&decode_entities(&rest[..next]));
        }
        rest = &rest[next..];
    }
    close_cell(&mut cell, &mut row);
    if let Some(r) = row.take() {
        rows.push(r);
    }
    rows.retain(|r| !r.is_empty());
    Ok(rows)
}

fn normalize_cell(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").replace('|', "\\|")
}

/// Render the first `<table>` of `html` as a GitHub-style pipe table.
///
/// The header is the first row made only of `th` cells, else the first row.
/// Row and column spans are flattened by repeating the cell; ragged rows are
/// padded with empty cells. A table without rows renders as the empty string.
pub fn html_table_to_markdown(html: &str) -> Result<String, TableError> {
    let rows = parse_rows(html)?;
    if rows.is_empty() {
        return Ok(String::new());
    }

    // Expand spans onto a grid.
    let mut grid: Vec<Vec<Option<String>>> = Vec::new();
    let mut header_rows = Vec::with_capacity(rows.len());
    for (r, cells) in rows.iter().enumerate() {
        if grid.len() <= r {
            grid.resize_with(r + 1, Vec::new);
        }
        header_rows.push(cells.iter().all(|c| c.header));
        let mut col = 0;
        for cell in cells {
            while grid[r].get(col).is_some_and(Option::is_some) {
                col += 1;
            }
            let text = normalize_cell(&cell.text);
            for dr in 0..cell.rowspan.min(rows.len() - r) {
                let target = r + dr;
                if grid.len() <= target {
                    grid.resize_with(target + 1, Vec::new);
                }
                let line = &mut grid[target];
                if line.len() < col + cell.colspan {
                    line.resize(col + cell.colspan, None);
                }
                for slot in &mut line[col..col + cell.colspan] {
                    *slot = Some(text.clone());
                }
            }
            col += cell.colspan;
        }
    }

    let width = grid.iter().map(Vec::len).max().unwrap_or(0);
    let header_index = header_rows.iter().position(|&h| h).unwrap_or(0);
    let render = |line: &Vec<Option<String>>| {
        let cells: Vec<&str> = (0..width).map(|i| line.get(i).and_then(|c| c.as_deref()).unwrap_or("")).collect();
        format!("| {} |", cells.join(" | "))
    };
    let mut out = vec![render(&grid[header_index]), format!("|{}", " --- |".repeat(width))];
    out.extend(grid.iter().enumerate().filter(|(i, _)| *i != header_index).map(|(_, line)| render(line)));
    Ok(out.join("\n"))
}

// ---------------------------------------------------------------------------
// Prompting

const SYSTEM_INSTRUCTIONS: &str = "\
Vous êtes un assistant virtuel destiné aux professionnels de santé, spécialisé dans les guides nationaux de vaccination.
You are a virtual assistant for healthcare professionals, specialised in national vaccination guidelines.

Règles / Rules:
1. Répondez uniquement à partir du contexte fourni ; n'utilisez aucune connaissance extérieure. Answer strictly from the provided context; never use outside knowledge.
2. Si le contexte ne permet pas de répondre, répondez exactement : « Je suis désolé, je n'ai pas pu trouver cette information. » If the context is insufficient, reply with that refusal sentence (translated into the question's language when it is not French).
3. Citez chaque information avec le marqueur [n] du bloc de contexte numéroté dont elle provient, par exemple [1] ou [2]. Cite every statement with the [n] marker of the numbered context block it comes from.
4. Les tableaux sont fournis en Markdown : conservez leur mise en forme lorsque vous les reprenez. Tables are given in Markdown; keep their layout when you reproduce them.
5. Répondez dans la langue de la question (français, arabe ou anglais). Answer in the language of the question.";

/// System instructions and user content for one generation call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

fn block_header(n: usize, chunk: &ContextChunk) -> String {
    match chunk.page {
        Some(page) => format!("[{n}] ({}, page {page})", chunk.filename),
        None => format!("[{n}] ({})", chunk.filename),
    }
}

fn render_prompt(question: &str, bundle: &ContextBundle) -> Prompt {
    let mut user = String::from("Contexte / Context:\n\n");
    if bundle.chunks.is_empty() {
        user.push_str("Aucun contexte disponible. / No context available.\n\n");
    }
    for (i, chunk) in bundle.chunks.iter().enumerate() {
        user.push_str(&block_header(i + 1, chunk));
        user.push('\n');
        user.push_str(chunk.text.trim_end());
        user.push_str("\n\n");
        for table in bundle.tables.iter().filter(|t| t.chunk_id == chunk.chunk_id) {
            match html_table_to_markdown(&table.html) {
                Ok(md) if !md.is_empty() => {
                    user.push_str(&md);
                    user.push_str("\n\n");
                }
                Ok(_) => {}
                Err(e) => log::warn!("table {} not rendered: {e}", table.chunk_id),
            }
        }
    }
    user.push_str("Question : ");
    user.push_str(question.trim());
    Prompt { system: SYSTEM_INSTRUCTIONS.to_string(), user }
}

/// Build the grounded prompt for `bundle.question`.
pub fn build_prompt(bundle: &ContextBundle) -> Prompt {
    render_prompt(&bundle.question, bundle)
}

fn marker_regex() -> &'static Regex {
    static MARKERS: OnceLock<Regex> = OnceLock::new();
    MARKERS.get_or_init(|| Regex::new(r"\[(\d+(?:\s*[,;]\s*\d+)*)\]").expect("static regex"))
}

/// Context block numbers (1-based) cited in `text`, in first-mention order,
/// restricted to `1..=blocks`.
pub fn cited_blocks(text: &str, blocks: usize) -> Vec<usize> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for caps in marker_regex().captures_iter(text) {
        for n in caps[1].split([',', ';']).filter_map(|s| s.trim().parse::<usize>().ok()) {
            if (1..=blocks).contains(&n) && seen.insert(n) {
                out.push(n);
            }
        }
    }
    out
}

/// First `max_chars` characters of `text`, cut back to a word boundary.
pub fn excerpt(text: &str, max_chars: usize) -> &str {
    let text = text.trim_start();
    let Some((cut, _)) = text.char_indices().nth(max_chars) else {
        return text.trim_end();
    };
    let prefix = &text[..cut];
    let boundary = if text[cut..].starts_with(char::is_whitespace) {
        prefix.len()
    } else {
        prefix.rfind(char::is_whitespace).unwrap_or(prefix.len())
    };
    prefix[..boundary].trim_end()
}

fn citation_for(chunk: &ContextChunk, config: &AnswerConfig) -> Citation {
    Citation {
        chunk_id: chunk.chunk_id.clone(),
        filename: chunk.filename.clone(),
        page: chunk.page,
        excerpt: excerpt(&chunk.text, config.excerpt_chars).to_string(),
    }
}

/// Generate an answer over `bundle` and resolve its `[n]` markers to citations.
///
/// Without any valid marker, every context block is cited.
pub fn answer_question(
    question: &str,
    bundle: &ContextBundle,
    llm: &dyn LanguageProvider,
    mode: AnswerMode,
    config: &AnswerConfig,
) -> Result<Answer, AnswerError> {
    let prompt = render_prompt(question, bundle);
    let started = Instant::now();
    let text = llm.generate(&prompt.system, &prompt.user).map_err(|source| AnswerError::Generation {
        question: question.to_string(),
        mode,
        source,
    })?;
    let latency_s = started.elapsed().as_secs_f64();

    let mut blocks = cited_blocks(&text, bundle.chunks.len());
    if blocks.is_empty() {
        blocks = (1..=bundle.chunks.len()).collect();
    }
    let citations = blocks.into_iter().map(|n| citation_for(&bundle.chunks[n - 1], config)).collect();
    Ok(Answer { text, citations, mode, latency_s })
}
