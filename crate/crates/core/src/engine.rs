//! The assembled question-answering engine: one hybrid index over the whole
//! corpus plus a per-document tool registry for agentic mode.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::agent::{run_agent, AgentConfig, AgentError, AgentTrace, RagPipeline, Tool, ToolRegistry};
use crate::answer::{answer_question, Answer, AnswerConfig, AnswerError, AnswerMode};
use crate::index::IndexError;
use crate::provider::LanguageProvider;
use crate::retrieve::{retrieve_context, EnsembleConfig, HybridIndex, RetrieveError};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Retrieve(#[from] RetrieveError),
    #[error(transparent)]
    Answer(#[from] AnswerError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub retrieval: EnsembleConfig,
    pub answer: AnswerConfig,
    pub agent: AgentConfig,
    /// Planner-facing description per source filename.
    pub tool_descriptions: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub answer: Answer,
    pub trace: Option<AgentTrace>,
    /// Retrieval queries (original first); empty in agentic mode.
    pub queries: Vec<String>,
    /// Why retrieval fell back to a reduced path, if it did.
    pub degraded: Option<String>,
}

pub struct Engine {
    index: Arc<HybridIndex>,
    registry: ToolRegistry,
    llm: Arc<dyn LanguageProvider>,
    config: EngineConfig,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("index", &self.index).field("tools", &self.registry.len()).finish()
    }
}

/// Lowercase ASCII identifier from a filename stem.
pub fn tool_id_for(filename: &str) -> String {
    let stem = filename.rsplit_once('.').map_or(filename, |(s, _)| s);
    let mut id = String::new();
    for c in stem.chars() {
        if c.is_ascii_alphanumeric() {
            id.push(c.to_ascii_lowercase());
        } else if !id.ends_with('_') {
            id.push('_');
        }
    }
    let id = id.trim_matches('_').to_string();
    if id.is_empty() {
        "document".to_string()
    } else {
        id
    }
}

/// One scoped retrieval tool per source document, in first-appearance order.
pub fn per_document_tools(
    index: &HybridIndex,
    llm: Arc<dyn LanguageProvider>,
    config: &EngineConfig,
) -> Result<ToolRegistry, EngineError> {
    let mut filenames: Vec<&str> = Vec::new();
    for chunk in index.chunks() {
        let f = chunk.metadata().filename.as_str();
        if !filenames.contains(&f) {
            filenames.push(f);
        }
    }
    let mut registry = ToolRegistry::new();
    for filename in filenames {
        let base = tool_id_for(filename);
        let mut tool_id = base.clone();
        let mut n = 2;
        while registry.get(&tool_id).is_some() {
            tool_id = format!("{base}_{n}");
            n += 1;
        }
        let scoped = index.subset(&tool_id, |c| c.metadata().filename == filename)?;
        let description = config
            .tool_descriptions
            .get(filename)
            .cloned()
            .unwrap_or_else(|| format!("Recherche dans le document {filename} ({} sections)", scoped.chunks().len()));
        let pipeline = RagPipeline {
            index: Arc::new(scoped),
            ensemble: config.retrieval.clone(),
            answer: config.answer,
            llm: Arc::clone(&llm),
            mode: AnswerMode::Enhanced,
        };
        registry.register(Tool::new(tool_id, description, Arc::new(pipeline)))?;
    }
    Ok(registry)
}

impl Engine {
    pub fn new(index: HybridIndex, llm: Arc<dyn LanguageProvider>, config: EngineConfig) -> Result<Self, EngineError> {
        config.retrieval.validate()?;
        config.agent.validate()?;
        let registry = per_document_tools(&index, Arc::clone(&llm), &config)?;
        Ok(Self { index: Arc::new(index), registry, llm, config })
    }

    pub fn index(&self) -> &HybridIndex {
        &self.index
    }

    pub fn registry(&self) -> &ToolRegistry {
        &self.registry
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// Simple mode is dense-only retrieval of the question without
    /// reformulation; Enhanced runs the full hybrid ensemble; Agentic runs
    /// the tool loop over per-document indexes.
    pub fn ask(&self, question: &str, mode: AnswerMode) -> Result<Outcome, EngineError> {
        if question.trim().is_empty() {
            return Err(RetrieveError::EmptyQuestion.into());
        }
        match mode {
            AnswerMode::Agentic => {
                if self.registry.is_empty() {
                    return self.ask(question, AnswerMode::Enhanced).map(|mut o| {
                        o.answer.mode = AnswerMode::Agentic;
                        o.degraded = Some("no documents to build tools from".into());
                        o
                    });
                }
                let (answer, trace) = run_agent(question, &self.registry, self.llm.as_ref(), &self.config.agent)?;
                Ok(Outcome { answer, trace: Some(trace), queries: Vec::new(), degraded: None })
            }
            AnswerMode::Simple | AnswerMode::Enhanced => {
                let ensemble = match mode {
                    AnswerMode::Simple => EnsembleConfig {
                        expansion_count: 0,
                        weights: (1.0, 0.0),
                        ..self.config.retrieval.clone()
                    },
                    _ => self.config.retrieval.clone(),
                };
                let retrieval = retrieve_context(question, &self.index, &ensemble, self.llm.as_ref())?;
                let answer = answer_question(question, &retrieval.bundle, self.llm.as_ref(), mode, &self.config.answer)?;
                Ok(Outcome { answer, trace: None, queries: retrieval.queries, degraded: retrieval.degraded })
            }
        }
    }
}
