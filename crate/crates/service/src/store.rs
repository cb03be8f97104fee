//! Chat state persisted as append-only JSON-lines event logs.
//!
//! `sessions.jsonl`, `messages.jsonl` and `ratings.jsonl` are replayed into an
//! in-memory projection on open. Every mutation is written and synced before
//! it becomes visible.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use guiderag_core::agent::AgentTrace;
use guiderag_core::answer::{AnswerMode, Citation};
use serde::{Deserialize, Serialize};

pub const MAX_TITLE_CHARS: usize = 200;
pub const MAX_RATING: i64 = 10;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0}")]
    Validation(String),
    #[error("corrupt log {} at line {line}: {message}", path.display())]
    Corrupt { path: PathBuf, line: usize, message: String },
    #[error("storage error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatMode {
    Enhanced,
    Agentic,
}

impl From<ChatMode> for AnswerMode {
    fn from(mode: ChatMode) -> Self {
        match mode {
            ChatMode::Enhanced => AnswerMode::Enhanced,
            ChatMode::Agentic => AnswerMode::Agentic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub score: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub message_id: String,
    pub role: Role,
    pub text: String,
    pub mode: ChatMode,
    #[serde(default)]
    pub citations: Vec<Citation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<AgentTrace>,
    #[serde(default)]
    pub latency_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<Rating>,
    /// The pipeline failed and `text` is an apology.
    #[serde(default)]
    pub degraded: bool,
    pub created_at: DateTime<Utc>,
}

/// Message content before an id is assigned.
#[derive(Debug, Clone)]
pub struct NewMessage {
    pub role: Role,
    pub text: String,
    pub mode: ChatMode,
    pub citations: Vec<Citation>,
    pub trace: Option<AgentTrace>,
    pub latency_s: f64,
    pub degraded: bool,
}

impl NewMessage {
    pub fn user(text: impl Into<String>, mode: ChatMode) -> Self {
        Self { role: Role::User, text: text.into(), mode, citations: vec![], trace: None, latency_s: 0.0, degraded: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub title: String,
    pub created_at: DateTime<Utc>,
    pub messages: Vec<Message>,
}

#[derive(Serialize, Deserialize)]
struct SessionEvent {
    session_id: String,
    title: String,
    created_at: DateTime<Utc>,
}

#[derive(Serialize, Deserialize)]
struct MessageEvent {
    session_id: String,
    message: Message,
}

#[derive(Serialize, Deserialize)]
struct RatingEvent {
    message_id: String,
    rating: Rating,
}

#[derive(Default)]
struct State {
    sessions: BTreeMap<String, Session>,
    /// message id → (session id, position)
    messages: HashMap<String, (String, usize)>,
    session_seq: u64,
    message_seq: u64,
}

impl State {
    fn apply_message(&mut self, session_id: &str, message: Message) -> Result<(), String> {
        let session = self.sessions.get_mut(session_id).ok_or_else(|| format!("unknown session {session_id}"))?;
        self.message_seq = self.message_seq.max(parse_seq(&message.message_id, 'm'));
        self.messages.insert(message.message_id.clone(), (session_id.to_string(), session.messages.len()));
        session.messages.push(message);
        Ok(())
    }

    fn apply_rating(&mut self, message_id: &str, rating: Rating) -> Result<(), String> {
        let (session_id, pos) = self.messages.get(message_id).ok_or_else(|| format!("unknown message {message_id}"))?;
        let message = &mut self.sessions.get_mut(session_id).expect("indexed session").messages[*pos];
        message.rating = Some(rating);
        Ok(())
    }
}

fn parse_seq(id: &str, prefix: char) -> u64 {
    id.strip_prefix(prefix).and_then(|n| n.parse().ok()).unwrap_or(0)
}

struct Logs {
    sessions: File,
    messages: File,
    ratings: File,
}

fn append<T: Serialize>(file: &mut File, event: &T) -> Result<(), StoreError> {
    let mut line = serde_json::to_vec(event).map_err(std::io::Error::from)?;
    line.push(b'\n');
    file.write_all(&line)?;
    file.sync_data()?;
    Ok(())
}

/// Replay one log. A torn final line (crash mid-write) is cut off.
fn replay<T: for<'de> Deserialize<'de>>(path: &Path, mut apply: impl FnMut(T) -> Result<(), String>) -> Result<(), StoreError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e.into()),
    };
    let complete = text.rfind('\n').map_or(0, |i| i + 1);
    if complete < text.len() {
        log::warn!("dropping torn final line in {}", path.display());
        OpenOptions::new().write(true).open(path)?.set_len(complete as u64)?;
    }
    for (i, line) in text[..complete].lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let corrupt = |message: String| StoreError::Corrupt { path: path.to_path_buf(), line: i + 1, message };
        let event = serde_json::from_str::<T>(line).map_err(|e| corrupt(e.to_string()))?;
        apply(event).map_err(corrupt)?;
    }
    Ok(())
}

fn open_append(path: &Path) -> Result<File, StoreError> {
    Ok(OpenOptions::new().create(true).append(true).open(path)?)
}

pub struct Store {
    dir: PathBuf,
    state: RwLock<State>,
    logs: Mutex<Logs>,
    session_locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("dir", &self.dir).finish()
    }
}

impl Store {
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        std::fs::create_dir_all(dir)?;
        let mut state = State::default();
        let (sessions, messages, ratings) = (dir.join("sessions.jsonl"), dir.join("messages.jsonl"), dir.join("ratings.jsonl"));
        replay(&sessions, |e: SessionEvent| {
            state.session_seq = state.session_seq.max(parse_seq(&e.session_id, 's'));
            let session = Session { session_id: e.session_id.clone(), title: e.title, created_at: e.created_at, messages: vec![] };
            match state.sessions.insert(e.session_id.clone(), session) {
                Some(_) => Err(format!("duplicate session {}", e.session_id)),
                None => Ok(()),
            }
        })?;
        replay(&messages, |e: MessageEvent| state.apply_message(&e.session_id, e.message))?;
        replay(&ratings, |e: RatingEvent| state.apply_rating(&e.message_id, e.rating))?;
        let logs = Logs { sessions: open_append(&sessions)?, messages: open_append(&messages)?, ratings: open_append(&ratings)? };
        Ok(Self { dir: dir.to_path_buf(), state: RwLock::new(state), logs: Mutex::new(logs), session_locks: Mutex::default() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn create_session(&self, title: &str) -> Result<Session, StoreError> {
        let count = title.chars().count();
        if count > MAX_TITLE_CHARS {
            return Err(StoreError::Validation(format!("title has {count} characters, at most {MAX_TITLE_CHARS} allowed")));
        }
        let mut logs = self.logs.lock().expect("log lock");
        let session_id = {
            let state = self.state.read().expect("state lock");
            format!("s{:06}", state.session_seq + 1)
        };
        let event = SessionEvent { session_id: session_id.clone(), title: title.to_string(), created_at: Utc::now() };
        append(&mut logs.sessions, &event)?;
        let session = Session { session_id: session_id.clone(), title: event.title, created_at: event.created_at, messages: vec![] };
        let mut state = self.state.write().expect("state lock");
        state.session_seq += 1;
        state.sessions.insert(session_id, session.clone());
        Ok(session)
    }

    /// Newest first.
    pub fn list_sessions(&self) -> Vec<Session> {
        let state = self.state.read().expect("state lock");
        let mut sessions: Vec<Session> = state.sessions.values().cloned().collect();
        sessions.sort_by(|a, b| b.created_at.cmp(&a.created_at).then_with(|| b.session_id.cmp(&a.session_id)));
        sessions
    }

    pub fn get_session(&self, session_id: &str) -> Result<Session, StoreError> {
        let state = self.state.read().expect("state lock");
        state.sessions.get(session_id).cloned().ok_or_else(|| StoreError::NotFound(format!("session {session_id}")))
    }

    /// Writer lock for one session; `None` for unknown sessions.
    pub fn session_lock(&self, session_id: &str) -> Option<Arc<tokio::sync::Mutex<()>>> {
        if !self.state.read().expect("state lock").sessions.contains_key(session_id) {
            return None;
        }
        let mut locks = self.session_locks.lock().expect("session locks");
        Some(Arc::clone(locks.entry(session_id.to_string()).or_default()))
    }

    pub fn append_message(&self, session_id: &str, new: NewMessage) -> Result<Message, StoreError> {
        let mut logs = self.logs.lock().expect("log lock");
        let message_id = {
            let state = self.state.read().expect("state lock");
            if !state.sessions.contains_key(session_id) {
                return Err(StoreError::NotFound(format!("session {session_id}")));
            }
            format!("m{:08}", state.message_seq + 1)
        };
        let assistant = new.role == Role::Assistant;
        let message = Message {
            message_id,
            role: new.role,
            text: new.text,
            mode: new.mode,
            citations: if assistant { new.citations } else { vec![] },
            trace: if assistant && new.mode == ChatMode::Agentic { new.trace } else { None },
            latency_s: new.latency_s,
            rating: None,
            degraded: new.degraded,
            created_at: Utc::now(),
        };
        append(&mut logs.messages, &MessageEvent { session_id: session_id.to_string(), message: message.clone() })?;
        let mut state = self.state.write().expect("state lock");
        state.apply_message(session_id, message.clone()).map_err(StoreError::Validation)?;
        Ok(message)
    }

    /// Only assistant messages can be rated; a new rating replaces the old one.
    pub fn rate_message(&self, message_id: &str, score: i64, comment: Option<String>) -> Result<Rating, StoreError> {
        if !(0..=MAX_RATING).contains(&score) {
            return Err(StoreError::Validation(format!("score must be between 0 and {MAX_RATING}, got {score}")));
        }
        let mut logs = self.logs.lock().expect("log lock");
        {
            let state = self.state.read().expect("state lock");
            let (session_id, pos) =
                state.messages.get(message_id).ok_or_else(|| StoreError::NotFound(format!("message {message_id}")))?;
            if state.sessions[session_id].messages[*pos].role != Role::Assistant {
                return Err(StoreError::Validation("only assistant messages can be rated".into()));
            }
        }
        let rating = Rating { score: score as u8, comment, created_at: Utc::now() };
        append(&mut logs.ratings, &RatingEvent { message_id: message_id.to_string(), rating: rating.clone() })?;
        self.state.write().expect("state lock").apply_rating(message_id, rating.clone()).map_err(StoreError::Validation)?;
        Ok(rating)
    }
}
