//! Model access: language and embedding provider interfaces, deterministic
//! offline mocks, and thin HTTP clients for remote deployments.

use std::fmt;
use std::path::Path;
use std::sync::Mutex;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Failure while talking to a model provider.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("invalid provider response: {0}")]
    InvalidResponse(String),
    #[error("provider configuration error: {0}")]
    Config(String),
}

/// Text generation backend.
pub trait LanguageProvider: Send + Sync {
    fn name(&self) -> &str;
    fn generate(&self, system_instructions: &str, user_content: &str) -> Result<String, ProviderError>;
}

/// Whether a text is embedded as a search query or as a stored passage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Query,
    Passage,
}

impl EmbeddingKind {
    fn as_str(self) -> &'static str {
        match self {
            EmbeddingKind::Query => "query",
            EmbeddingKind::Passage => "passage",
        }
    }
}

/// Text embedding backend. Every returned vector has `dimension()` components.
pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, texts: &[String], kind: EmbeddingKind) -> Result<Vec<Vec<f32>>, ProviderError>;
}

impl<T: LanguageProvider + ?Sized> LanguageProvider for std::sync::Arc<T> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn generate(&self, system_instructions: &str, user_content: &str) -> Result<String, ProviderError> {
        (**self).generate(system_instructions, user_content)
    }
}

impl<T: EmbeddingProvider + ?Sized> EmbeddingProvider for std::sync::Arc<T> {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed(&self, texts: &[String], kind: EmbeddingKind) -> Result<Vec<Vec<f32>>, ProviderError> {
        (**self).embed(texts, kind)
    }
}

// ---------------------------------------------------------------------------
// Mock embeddings

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |hash, &b| (hash ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// splitmix64 generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in [-1, 1] from the top 53 bits.
    pub fn next_signed_unit(&mut self) -> f64 {
        let unit = (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        unit * 2.0 - 1.0
    }
}

/// Bag-of-tokens hash embedding: each lowercase whitespace token maps to a
/// pseudo-random vector seeded by its FNV-1a hash; a text is the normalized
/// sum of its token vectors. The embedding kind is ignored.
#[derive(Debug, Clone)]
pub struct MockEmbeddingProvider {
    dimension: usize,
}

impl Default for MockEmbeddingProvider {
    fn default() -> Self {
        Self { dimension: 64 }
    }
}

impl MockEmbeddingProvider {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension }
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = SplitMix64::new(fnv1a64(token.as_bytes()));
        (0..self.dimension).map(|_| rng.next_signed_unit()).collect()
    }

    pub fn embed_text(&self, text: &str) -> Vec<f32> {
        let mut acc = vec![0.0_f64; self.dimension];
        for token in text.split_whitespace() {
            let token = token.to_lowercase();
            for (a, v) in acc.iter_mut().zip(self.token_vector(&token)) {
                *a += v;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            acc.iter().map(|v| (v / norm) as f32).collect()
        } else {
            vec![0.0; self.dimension]
        }
    }
}

impl EmbeddingProvider for MockEmbeddingProvider {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, texts: &[String], _kind: EmbeddingKind) -> Result<Vec<Vec<f32>>, ProviderError> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }
}

// ---------------------------------------------------------------------------
// Scripted language mock

/// One entry of a script file. Exactly one of `sha256` / `pattern` selects the
/// prompt; exactly one of `response` / `error` gives the outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptRule {
    /// Hex SHA-256 of the user content.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
    /// Regex searched in `system + "\n\n" + user`. `$1`-style references in
    /// `response` expand to its capture groups.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    /// Simulated transport failure message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Script {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub default: String,
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
}

#[derive(Debug)]
enum Matcher {
    Sha256(String),
    Pattern(Regex),
}

#[derive(Debug)]
enum Outcome {
    Respond(String),
    Fail(String),
}

/// A recorded call to a [`ScriptedLanguageProvider`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordedPrompt {
    pub system: String,
    pub user: String,
}

/// Deterministic language provider driven by a rule list. First matching rule
/// wins; unmatched prompts receive the default response. Every call is
/// recorded for inspection.
#[derive(Debug)]
pub struct ScriptedLanguageProvider {
    name: String,
    default: String,
    rules: Vec<(Matcher, Outcome)>,
    calls: Mutex<Vec<RecordedPrompt>>,
}

impl ScriptedLanguageProvider {
    pub fn new(default: impl Into<String>) -> Self {
        Self {
            name: "scripted-mock".to_string(),
            default: default.into(),
            rules: Vec::new(),
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn from_script(script: Script) -> Result<Self, ProviderError> {
        let mut provider = Self::new(script.default);
        if let Some(name) = script.name {
            provider.name = name;
        }
        for (i, rule) in script.rules.into_iter().enumerate() {
            let matcher = match (rule.sha256, rule.pattern) {
                (Some(h), None) => Matcher::Sha256(h.to_ascii_lowercase()),
                (None, Some(p)) => Matcher::Pattern(
                    Regex::new(&p).map_err(|e| ProviderError::Config(format!("rule {i}: {e}")))?,
                ),
                _ => {
                    return Err(ProviderError::Config(format!(
                        "rule {i}: exactly one of sha256 or pattern is required"
                    )))
                }
            };
            let outcome = match (rule.response, rule.error) {
                (Some(r), None) => Outcome::Respond(r),
                (None, Some(e)) => Outcome::Fail(e),
                _ => {
                    return Err(ProviderError::Config(format!(
                        "rule {i}: exactly one of response or error is required"
                    )))
                }
            };
            provider.rules.push((matcher, outcome));
        }
        Ok(provider)
    }

    pub fn from_json(json: &str) -> Result<Self, ProviderError> {
        let script: Script = serde_json::from_str(json).map_err(|e| ProviderError::Config(e.to_string()))?;
        Self::from_script(script)
    }

    pub fn from_file(path: &Path) -> Result<Self, ProviderError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Append a regex rule. Panics on an invalid pattern (test construction helper).
    pub fn on_pattern(mut self, pattern: &str, response: impl Into<String>) -> Self {
        let re = Regex::new(pattern).expect("valid pattern");
        self.rules.push((Matcher::Pattern(re), Outcome::Respond(response.into())));
        self
    }

    pub fn on_sha256(mut self, user_content_sha256: &str, response: impl Into<String>) -> Self {
        self.rules.push((
            Matcher::Sha256(user_content_sha256.to_ascii_lowercase()),
            Outcome::Respond(response.into()),
        ));
        self
    }

    pub fn fail_on_pattern(mut self, pattern: &str, message: impl Into<String>) -> Self {
        let re = Regex::new(pattern).expect("valid pattern");
        self.rules.push((Matcher::Pattern(re), Outcome::Fail(message.into())));
        self
    }

    pub fn calls(&self) -> Vec<RecordedPrompt> {
        self.calls.lock().expect("calls lock").clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().expect("calls lock").len()
    }
}

/// Hex SHA-256 of a prompt's user content, as used by script rules.
pub fn content_sha256(user_content: &str) -> String {
    hex::encode(Sha256::digest(user_content.as_bytes()))
}

impl LanguageProvider for ScriptedLanguageProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, system_instructions: &str, user_content: &str) -> Result<String, ProviderError> {
        self.calls.lock().expect("calls lock").push(RecordedPrompt {
            system: system_instructions.to_string(),
            user: user_content.to_string(),
        });
        let combined = format!("{system_instructions}\n\n{user_content}");
        let mut digest = None;
        for (matcher, outcome) in &self.rules {
            let expanded = match matcher {
                Matcher::Sha256(h) => {
                    let d = digest.get_or_insert_with(|| content_sha256(user_content));
                    if d != h {
                        continue;
                    }
                    None
                }
                Matcher::Pattern(re) => match re.captures(&combined) {
                    Some(caps) => {
                        if let Outcome::Respond(template) = outcome {
                            let mut out = String::new();
                            caps.expand(template, &mut out);
                            Some(out)
                        } else {
                            None
                        }
                    }
                    None => continue,
                },
            };
            return match outcome {
                Outcome::Respond(r) => Ok(expanded.unwrap_or_else(|| r.clone())),
                Outcome::Fail(e) => Err(ProviderError::Transport(e.clone())),
            };
        }
        Ok(self.default.clone())
    }
}

// ---------------------------------------------------------------------------
// Remote providers

/// Endpoint settings shared by the remote clients. The API key is read from
/// the named environment variable at call time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteEndpoint {
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
}

impl RemoteEndpoint {
    fn post<B: Serialize, R: for<'de> Deserialize<'de>>(&self, body: &B) -> Result<R, ProviderError> {
        let mut request = ureq::post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(var) = &self.api_key_env {
            let key = std::env::var(var)
                .map_err(|_| ProviderError::Config(format!("environment variable {var} is not set")))?;
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request.send_json(body).map_err(|e| ProviderError::Transport(e.to_string()))?;
        response
            .body_mut()
            .read_json::<R>()
            .map_err(|e| ProviderError::InvalidResponse(e.to_string()))
    }
}

/// Default model identifier for the remote language provider.
pub const DEFAULT_LANGUAGE_MODEL: &str = "gemini-2.0-flash";
/// Default model identifier for the remote embedding provider.
pub const DEFAULT_EMBEDDING_MODEL: &str = "intfloat/multilingual-e5-base";

#[derive(Serialize)]
struct GenerateRequest<'a> {
    model: &'a str,
    system: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct GenerateResponse {
    text: String,
}

/// HTTP JSON language provider: `{system, content}` → `{text}`.
#[derive(Debug, Clone)]
pub struct RemoteLanguageProvider {
    endpoint: RemoteEndpoint,
}

impl RemoteLanguageProvider {
    pub fn new(endpoint: RemoteEndpoint) -> Self {
        Self { endpoint }
    }
}

impl LanguageProvider for RemoteLanguageProvider {
    fn name(&self) -> &str {
        &self.endpoint.model
    }

    fn generate(&self, system_instructions: &str, user_content: &str) -> Result<String, ProviderError> {
        let response: GenerateResponse = self.endpoint.post(&GenerateRequest {
            model: &self.endpoint.model,
            system: system_instructions,
            content: user_content,
        })?;
        Ok(response.text)
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    texts: Vec<String>,
    kind: EmbeddingKind,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

/// HTTP JSON embedding provider: `{texts, kind}` → `{vectors}`. Texts are sent
/// with the `query: ` / `passage: ` prefixes e5-family models expect.
#[derive(Debug, Clone)]
pub struct RemoteEmbeddingProvider {
    endpoint: RemoteEndpoint,
    dimension: usize,
}

impl RemoteEmbeddingProvider {
    pub fn new(endpoint: RemoteEndpoint, dimension: usize) -> Self {
        Self { endpoint, dimension }
    }
}

impl EmbeddingProvider for RemoteEmbeddingProvider {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, texts: &[String], kind: EmbeddingKind) -> Result<Vec<Vec<f32>>, ProviderError> {
        let prefixed = texts.iter().map(|t| format!("{}: {t}", kind.as_str())).collect();
        let response: EmbedResponse = self.endpoint.post(&EmbedRequest {
            model: &self.endpoint.model,
            texts: prefixed,
            kind,
        })?;
        if response.vectors.len() != texts.len() {
            return Err(ProviderError::InvalidResponse(format!(
                "expected {} vectors, got {}",
                texts.len(),
                response.vectors.len()
            )));
        }
        if let Some(bad) = response.vectors.iter().find(|v| v.len() != self.dimension) {
            return Err(ProviderError::InvalidResponse(format!(
                "vector of length {} does not match dimension {}",
                bad.len(),
                self.dimension
            )));
        }
        Ok(response.vectors)
    }
}

impl fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
