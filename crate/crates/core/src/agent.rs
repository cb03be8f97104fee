//! Agentic answering: a planner decomposes the question, a ReAct-style loop
//! picks scoped retrieval tools one step at a time, and an aggregation pass
//! reconciles the observations into the final answer.
//!
//! The provider speaks a line grammar:
//!
//! ```text
//! THOUGHT: <reasoning>
//! ACTION: <tool_id> | <query>
//! ```
//!
//! or `FINISH: <answer>` in place of the `ACTION` line. A reply that does not
//! parse gets one reprompt with a format reminder.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::answer::{answer_question, Answer, AnswerConfig, AnswerError, AnswerMode, Citation, REFUSAL_FR};
use crate::provider::{LanguageProvider, ProviderError};
use crate::retrieve::{retrieve_context, EnsembleConfig, HybridIndex, RetrieveError};

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("tool `{0}` is already registered")]
    DuplicateTool(String),
    #[error("invalid tool `{tool_id}`: {message}")]
    InvalidTool { tool_id: String, message: String },
    #[error("no tools registered")]
    EmptyRegistry,
    #[error("planning failed: {0}")]
    Planning(ProviderError),
    #[error("agent step failed: {0}")]
    Step(ProviderError),
    #[error("malformed agent action after reprompt: {0}")]
    MalformedAction(String),
    #[error("aggregation failed: {0}")]
    Aggregation(ProviderError),
    #[error("aggregation needs at least one observation")]
    NoObservations,
    #[error("invalid agent configuration: {0}")]
    Config(String),
}

/// Failure inside a tool's own retrieval and answering pipeline.
#[derive(Debug, thiserror::Error)]
pub enum ToolError {
    #[error(transparent)]
    Retrieve(#[from] RetrieveError),
    #[error(transparent)]
    Answer(#[from] AnswerError),
    #[error("tool timed out after {0:.1}s")]
    Timeout(f64),
    #[error("tool worker stopped without a result")]
    Disconnected,
}

/// What a tool executes for a query.
pub trait ToolPipeline: Send + Sync {
    fn run(&self, query: &str) -> Result<Answer, ToolError>;
}

/// Retrieval plus grounded generation over one scoped index.
pub struct RagPipeline {
    pub index: Arc<HybridIndex>,
    pub ensemble: EnsembleConfig,
    pub answer: AnswerConfig,
    pub llm: Arc<dyn LanguageProvider>,
    pub mode: AnswerMode,
}

impl ToolPipeline for RagPipeline {
    fn run(&self, query: &str) -> Result<Answer, ToolError> {
        let retrieval = retrieve_context(query, &self.index, &self.ensemble, self.llm.as_ref())?;
        Ok(answer_question(query, &retrieval.bundle, self.llm.as_ref(), self.mode, &self.answer)?)
    }
}

#[derive(Clone)]
pub struct Tool {
    pub tool_id: String,
    pub description: String,
    pub pipeline: Arc<dyn ToolPipeline>,
}

impl std::fmt::Debug for Tool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tool").field("tool_id", &self.tool_id).field("description", &self.description).finish()
    }
}

impl Tool {
    pub fn new(tool_id: impl Into<String>, description: impl Into<String>, pipeline: Arc<dyn ToolPipeline>) -> Self {
        Self { tool_id: tool_id.into(), description: description.into(), pipeline }
    }
}

/// Tools in registration order.
#[derive(Debug, Clone, Default)]
pub struct ToolRegistry {
    tools: Vec<Tool>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, tool: Tool) -> Result<&mut Self, AgentError> {
        if tool.tool_id.trim().is_empty() || tool.tool_id.contains('|') || tool.tool_id.contains(char::is_whitespace) {
            return Err(AgentError::InvalidTool {
                tool_id: tool.tool_id,
                message: "ids must be non-empty without whitespace or '|'".into(),
            });
        }
        if tool.description.trim().is_empty() {
            return Err(AgentError::InvalidTool { tool_id: tool.tool_id, message: "description is empty".into() });
        }
        if self.get(&tool.tool_id).is_some() {
            return Err(AgentError::DuplicateTool(tool.tool_id));
        }
        self.tools.push(tool);
        Ok(self)
    }

    pub fn get(&self, tool_id: &str) -> Option<&Tool> {
        self.tools.iter().find(|t| t.tool_id == tool_id)
    }

    pub fn tools(&self) -> &[Tool] {
        &self.tools
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    fn listing(&self) -> String {
        self.tools.iter().map(|t| format!("- {}: {}", t.tool_id, t.description)).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AgentAction {
    CallTool { tool_id: String, query: String },
    Finish { answer: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentStep {
    pub thought: String,
    pub action: AgentAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentTrace {
    pub plan: Vec<String>,
    pub steps: Vec<AgentStep>,
    /// `"tool_id | query"` for every executed tool call.
    pub completed_tasks: BTreeSet<String>,
    /// The step limit was reached and the final step was forced.
    #[serde(default)]
    pub truncated: bool,
}

impl AgentTrace {
    pub fn finish_count(&self) -> usize {
        self.steps.iter().filter(|s| matches!(s.action, AgentAction::Finish { .. })).count()
    }

    /// Exactly one `Finish`, in last position, carrying no observation.
    pub fn is_well_formed(&self) -> bool {
        self.finish_count() == 1
            && self.steps.last().is_some_and(|s| matches!(s.action, AgentAction::Finish { .. }) && s.observation.is_none())
    }
}

pub const DEFAULT_PLANNER_TEMPLATE: &str = "Question: {question}\n\nAvailable tools:\n{tools}\n\n\
List the subtasks needed to answer the question, one per line.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub max_steps: usize,
    /// Per tool call; `None` waits indefinitely.
    pub tool_timeout_s: Option<f64>,
    /// `{question}` and `{tools}` are substituted.
    pub planner_prompt_template: String,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self { max_steps: 8, tool_timeout_s: None, planner_prompt_template: DEFAULT_PLANNER_TEMPLATE.to_string() }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.max_steps == 0 {
            return Err(AgentError::Config("max_steps must be at least 1".into()));
        }
        if let Some(t) = self.tool_timeout_s {
            if !(t > 0.0 && t.is_finite()) {
                return Err(AgentError::Config(format!("tool_timeout_s must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

const PLANNER_SYSTEM: &str = "You are the planning controller of a clinical vaccination assistant. \
Decompose the user's question into a short ordered list of subtasks that the available document tools can answer. \
Vous êtes le contrôleur de planification : décomposez la question en sous-tâches, une par ligne.";

const STEP_SYSTEM: &str = "You are a reasoning agent that answers clinical vaccination questions by calling document tools. \
Each tool searches one source document. Call only the tools relevant to the question.\n\
Reply using exactly one of these formats:\n\
THOUGHT: <your reasoning>\nACTION: <tool_id> | <query>\n\
or\n\
THOUGHT: <your reasoning>\nFINISH: <final answer>";

const FORMAT_REMINDER: &str = "FORMAT REMINDER: your previous reply could not be parsed. \
Reply with a THOUGHT: line followed by either ACTION: <tool_id> | <query> or FINISH: <answer>.";

const AGGREGATE_SYSTEM: &str = "You are the final reasoning pass of a clinical vaccination assistant. \
Validate the tool observations below for coherence and factual correctness, resolve contradictions in favour of the \
official guideline sources, and write the final answer from them only. \
If they do not contain the answer, say so. Vérifiez la cohérence des observations et rédigez la réponse finale.";

fn strip_prefix_ci<'a>(line: &'a str, prefix: &str) -> Option<&'a str> {
    let trimmed = line.trim_start().trim_start_matches(['*', '#', '>']).trim_start();
    let head = trimmed.get(..prefix.len())?;
    head.eq_ignore_ascii_case(prefix).then(|| trimmed[prefix.len()..].trim_start())
}

/// Parse one provider reply. Unknown tools and empty queries are errors.
pub fn parse_action(reply: &str, registry: &ToolRegistry) -> Result<(String, AgentAction), String> {
    let lines: Vec<&str> = reply.lines().collect();
    let mut thought = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if let Some(rest) = strip_prefix_ci(line, "FINISH:") {
            let mut answer = vec![rest];
            answer.extend(&lines[i + 1..]);
            let answer = answer.join("\n").trim().to_string();
            if answer.is_empty() {
                return Err("FINISH without an answer".into());
            }
            return Ok((thought.join("\n").trim().to_string(), AgentAction::Finish { answer }));
        }
        if let Some(rest) = strip_prefix_ci(line, "ACTION:") {
            let (tool_id, query) = rest.split_once('|').ok_or_else(|| format!("ACTION without '|': `{rest}`"))?;
            let (tool_id, query) = (tool_id.trim().trim_matches('`'), query.trim());
            if registry.get(tool_id).is_none() {
                return Err(format!("unknown tool `{tool_id}`"));
            }
            if query.is_empty() {
                return Err(format!("empty query for tool `{tool_id}`"));
            }
            return Ok((
                thought.join("\n").trim().to_string(),
                AgentAction::CallTool { tool_id: tool_id.to_string(), query: query.to_string() },
            ));
        }
        match strip_prefix_ci(line, "THOUGHT:") {
            Some(rest) => thought.push(rest),
            None => thought.push(line.trim()),
        }
    }
    Err("reply contains neither ACTION nor FINISH".into())
}

fn parse_lines(output: &str) -> Vec<String> {
    output
        .lines()
        .map(|l| l.trim().trim_start_matches(|c: char| c.is_ascii_digit() || matches!(c, '.' | ')' | '-' | '*' | '•')).trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

fn planner_prompt(template: &str, question: &str, registry: &ToolRegistry) -> String {
    template.replace("{question}", question).replace("{tools}", &registry.listing())
}

/// Subtasks for the question; an empty plan falls back to the question itself.
pub fn plan(question: &str, registry: &ToolRegistry, llm: &dyn LanguageProvider) -> Result<Vec<String>, AgentError> {
    plan_with(question, registry, llm, DEFAULT_PLANNER_TEMPLATE)
}

fn plan_with(question: &str, registry: &ToolRegistry, llm: &dyn LanguageProvider, template: &str) -> Result<Vec<String>, AgentError> {
    if registry.is_empty() {
        return Err(AgentError::EmptyRegistry);
    }
    let output = llm.generate(PLANNER_SYSTEM, &planner_prompt(template, question, registry)).map_err(AgentError::Planning)?;
    let subtasks = parse_lines(&output);
    Ok(if subtasks.is_empty() { vec![question.to_string()] } else { subtasks })
}

fn aggregation_prompt(question: Option<&str>, draft: Option<&str>, observations: &[(String, String)]) -> String {
    let mut user = String::new();
    if let Some(q) = question {
        user.push_str(&format!("Question: {q}\n\n"));
    }
    user.push_str("Observations:\n");
    for (tool_id, text) in observations {
        user.push_str(&format!("[{tool_id}] {text}\n"));
    }
    if let Some(d) = draft {
        user.push_str(&format!("\nDraft answer: {d}\n"));
    }
    user.push_str("\nFinal answer:");
    user
}

/// Reconcile tool observations into one answer text.
pub fn aggregate(observations: &[(String, String)], llm: &dyn LanguageProvider) -> Result<String, AgentError> {
    aggregate_with(None, None, observations, llm)
}

fn aggregate_with(
    question: Option<&str>,
    draft: Option<&str>,
    observations: &[(String, String)],
    llm: &dyn LanguageProvider,
) -> Result<String, AgentError> {
    if observations.is_empty() {
        return Err(AgentError::NoObservations);
    }
    llm.generate(AGGREGATE_SYSTEM, &aggregation_prompt(question, draft, observations))
        .map(|t| t.trim().to_string())
        .map_err(AgentError::Aggregation)
}

fn step_prompt(question: &str, plan: &[String], registry: &ToolRegistry, steps: &[AgentStep]) -> String {
    let mut user = format!("Question: {question}\n\nPlan:\n");
    for (i, task) in plan.iter().enumerate() {
        user.push_str(&format!("{}. {task}\n", i + 1));
    }
    user.push_str("\nTools:\n");
    user.push_str(&registry.listing());
    user.push_str("\n\nHistory:\n");
    if steps.is_empty() {
        user.push_str("(none)\n");
    }
    for step in steps {
        if let AgentAction::CallTool { tool_id, query } = &step.action {
            user.push_str(&format!("ACTION: {tool_id} | {query}\nOBSERVATION: {}\n", step.observation.as_deref().unwrap_or("")));
        }
    }
    user.push_str("\nNext step:");
    user
}

fn run_tool(tool: &Tool, query: &str, timeout: Option<f64>) -> Result<Answer, ToolError> {
    let Some(secs) = timeout else {
        return tool.pipeline.run(query);
    };
    let (tx, rx) = mpsc::channel();
    let pipeline = Arc::clone(&tool.pipeline);
    let query = query.to_string();
    std::thread::spawn(move || {
        let _ = tx.send(pipeline.run(&query));
    });
    match rx.recv_timeout(Duration::from_secs_f64(secs)) {
        Ok(result) => result,
        Err(mpsc::RecvTimeoutError::Timeout) => Err(ToolError::Timeout(secs)),
        Err(mpsc::RecvTimeoutError::Disconnected) => Err(ToolError::Disconnected),
    }
}

/// Plan, loop over tool calls up to `max_steps`, then aggregate.
///
/// Repeated `(tool, query)` pairs are served from memory. The final answer
/// cites the union of the invoked tools' citations. When the step limit is
/// hit, a best-effort `Finish` is appended and the trace marked truncated.
pub fn run_agent(
    question: &str,
    registry: &ToolRegistry,
    llm: &dyn LanguageProvider,
    config: &AgentConfig,
) -> Result<(Answer, AgentTrace), AgentError> {
    config.validate()?;
    let started = Instant::now();
    let mut trace = AgentTrace { plan: plan_with(question, registry, llm, &config.planner_prompt_template)?, ..Default::default() };

    let mut memo: HashMap<(String, String), String> = HashMap::new();
    let mut observations: Vec<(String, String)> = Vec::new();
    let mut citations: Vec<Citation> = Vec::new();
    let mut cited = HashSet::new();

    let finish = |trace: &mut AgentTrace, thought: String, text: String, citations: Vec<Citation>| {
        trace.steps.push(AgentStep { thought, action: AgentAction::Finish { answer: text.clone() }, observation: None });
        Answer { text, citations, mode: AnswerMode::Agentic, latency_s: started.elapsed().as_secs_f64() }
    };

    for _ in 0..config.max_steps {
        let user = step_prompt(question, &trace.plan, registry, &trace.steps);
        let reply = llm.generate(STEP_SYSTEM, &user).map_err(AgentError::Step)?;
        let (thought, action) = match parse_action(&reply, registry) {
            Ok(parsed) => parsed,
            Err(first) => {
                log::debug!("reprompting after malformed action: {first}");
                let retry = llm.generate(STEP_SYSTEM, &format!("{user}\n\n{FORMAT_REMINDER}")).map_err(AgentError::Step)?;
                parse_action(&retry, registry).map_err(AgentError::MalformedAction)?
            }
        };
        match action {
            AgentAction::CallTool { tool_id, query } => {
                let key = (tool_id.clone(), query.clone());
                let observation = match memo.get(&key) {
                    Some(o) => o.clone(),
                    None => {
                        let tool = registry.get(&tool_id).expect("parse_action checks tool ids");
                        let observation = match run_tool(tool, &query, config.tool_timeout_s) {
                            Ok(answer) => {
                                for c in answer.citations {
                                    if cited.insert((c.chunk_id.clone(), c.excerpt.clone())) {
                                        citations.push(c);
                                    }
                                }
                                observations.push((tool_id.clone(), answer.text.clone()));
                                answer.text
                            }
                            Err(e) => format!("ERROR: {e}"),
                        };
                        trace.completed_tasks.insert(format!("{tool_id} | {query}"));
                        memo.insert(key, observation.clone());
                        observation
                    }
                };
                trace.steps.push(AgentStep {
                    thought,
                    action: AgentAction::CallTool { tool_id, query },
                    observation: Some(observation),
                });
            }
            AgentAction::Finish { answer: draft } => {
                let text = if observations.is_empty() {
                    draft
                } else {
                    aggregate_with(Some(question), Some(&draft), &observations, llm)?
                };
                let answer = finish(&mut trace, thought, text, citations);
                return Ok((answer, trace));
            }
        }
    }

    trace.truncated = true;
    let text = if observations.is_empty() {
        REFUSAL_FR.to_string()
    } else {
        aggregate_with(Some(question), None, &observations, llm).unwrap_or_else(|e| {
            log::warn!("aggregation after truncation failed: {e}");
            observations.iter().map(|(_, t)| t.as_str()).collect::<Vec<_>>().join("\n\n")
        })
    };
    let answer = finish(&mut trace, "step limit reached; summarising observations".into(), text, citations);
    Ok((answer, trace))
}
