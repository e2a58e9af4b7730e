//! Chat-completion and embedding gateway with schema validation and record/replay.
//!
//! Every LLM-backed step of the pipeline goes through [`LlmClient::complete`],
//! which only ever returns JSON that passed the task's response schema.
//!
//! Requests are identified by the SHA-256 of their serialized body. In `record`
//! mode each exchange is written to `<fixture_dir>/<hash>.json`; in `replay`
//! mode responses are read back from there and the transport is never touched.

mod schema;
mod transport;

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use transport::{HttpTransport, Transport};

pub const PROMPT_VERSION: &str = "v1";

const SYSTEM_PROMPT: &str = include_str!("prompts/system.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmMode {
    Live,
    Record,
    Replay,
}

impl std::str::FromStr for LlmMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "live" => Ok(LlmMode::Live),
            "record" => Ok(LlmMode::Record),
            "replay" => Ok(LlmMode::Replay),
            other => Err(Error::InvalidConfig(format!("unknown LLM mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Analyze,
    Reflect,
    Refine,
    Paraphrase,
    JudgeSimilarity,
}

impl TaskKind {
    fn instructions(self) -> &'static str {
        match self {
            TaskKind::Analyze => include_str!("prompts/analyze.txt"),
            TaskKind::Reflect | TaskKind::Refine => include_str!("prompts/reflect.txt"),
            TaskKind::Paraphrase => include_str!("prompts/paraphrase.txt"),
            TaskKind::JudgeSimilarity => include_str!("prompts/judge_similarity.txt"),
        }
    }

    pub fn schema_id(self) -> String {
        let name = match self {
            TaskKind::Analyze => "failure_patterns",
            TaskKind::Reflect | TaskKind::Refine => "reflection_suggestions",
            TaskKind::Paraphrase => "scenario_paraphrase",
            TaskKind::JudgeSimilarity => "similarity_judgment",
        };
        format!("{name}.{PROMPT_VERSION}")
    }
}

/// One schema-constrained LLM request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LlmTask {
    pub kind: TaskKind,
    pub prompt: String,
    pub response_schema_id: String,
}

impl LlmTask {
    /// Builds the prompt from the task's instructions, its schema block, and the
    /// JSON-serialized input payload.
    pub fn new(kind: TaskKind, payload: &impl Serialize) -> Self {
        let schema = serde_json::to_string_pretty(&schema::schema_for(kind)).expect("schema serializes");
        let input = serde_json::to_string_pretty(payload).expect("payload serializes");
        let schema_id = kind.schema_id();
        let prompt = format!(
            "{}\nResponse schema `{schema_id}`:\n```json\n{schema}\n```\n\nInput:\n```json\n{input}\n```\n",
            kind.instructions()
        );
        Self {
            kind,
            prompt,
            response_schema_id: schema_id,
        }
    }
}

/// Connection settings for the LLM and embedding endpoints.
#[derive(Clone, Serialize, Deserialize)]
pub struct LlmConfig {
    pub base_url: String,
    pub model_name: String,
    pub embed_model: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub mode: LlmMode,
    pub fixture_dir: PathBuf,
    pub max_retries: u32,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    pub seed: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model_name: "llama-3-8b-instruct".into(),
            embed_model: "text-embedding".into(),
            api_key: None,
            mode: LlmMode::Replay,
            fixture_dir: PathBuf::from("fixtures/llm"),
            max_retries: 2,
            timeout_ms: 30_000,
            max_in_flight: 4,
            seed: 0,
        }
    }
}

impl fmt::Debug for LlmConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LlmConfig")
            .field("base_url", &self.base_url)
            .field("model_name", &self.model_name)
            .field("embed_model", &self.embed_model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("mode", &self.mode)
            .field("fixture_dir", &self.fixture_dir)
            .field("max_retries", &self.max_retries)
            .field("timeout_ms", &self.timeout_ms)
            .field("max_in_flight", &self.max_in_flight)
            .finish()
    }
}

impl LlmConfig {
    /// Reads `SERA_LLM_*`, `SERA_EMBED_MODEL` and `SERA_FIXTURE_DIR` over the defaults.
    pub fn from_env() -> Result<Self> {
        Self::from_lookup(|key| std::env::var(key).ok())
    }

    pub fn from_lookup(lookup: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(v) = lookup("SERA_LLM_BASE_URL") {
            cfg.base_url = v;
        }
        if let Some(v) = lookup("SERA_LLM_MODEL") {
            cfg.model_name = v;
        }
        if let Some(v) = lookup("SERA_EMBED_MODEL") {
            cfg.embed_model = v;
        }
        cfg.api_key = lookup("SERA_LLM_API_KEY").filter(|k| !k.is_empty());
        if let Some(v) = lookup("SERA_LLM_MODE") {
            cfg.mode = v.parse()?;
        }
        if let Some(v) = lookup("SERA_FIXTURE_DIR") {
            cfg.fixture_dir = PathBuf::from(v);
        }
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct ChatMessage {
    role: &'static str,
    content: String,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    seed: u64,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Serialize, Deserialize)]
struct Fixture {
    request_hash: String,
    request: Value,
    response: Value,
}

/// Bounds the number of concurrent requests.
struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut active = self.active.lock().unwrap();
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap();
        }
        *active += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// Handle to the LLM backend. Cheap to share behind an `Arc`.
pub struct LlmClient {
    config: LlmConfig,
    transport: Arc<dyn Transport>,
    in_flight: InFlight,
}

impl fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LlmClient")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl LlmClient {
    pub fn new(config: LlmConfig) -> Self {
        Self::with_transport(config, Arc::new(HttpTransport))
    }

    pub fn with_transport(config: LlmConfig, transport: Arc<dyn Transport>) -> Self {
        let limit = config.max_in_flight.max(1);
        Self {
            config,
            transport,
            in_flight: InFlight {
                limit,
                active: Mutex::new(0),
                freed: Condvar::new(),
            },
        }
    }

    pub fn config(&self) -> &LlmConfig {
        &self.config
    }

    /// Runs a chat completion and returns the first fenced JSON object of the
    /// reply, validated against the task schema. A reply that fails extraction
    /// or validation is re-prompted with the error appended, up to `max_retries`.
    pub fn complete(&self, task: &LlmTask) -> Result<Value> {
        let mut messages = vec![
            ChatMessage {
                role: "system",
                content: SYSTEM_PROMPT.to_string(),
            },
            ChatMessage {
                role: "user",
                content: task.prompt.clone(),
            },
        ];
        let mut last_error = String::new();
        for attempt in 0..=self.config.max_retries {
            let request = ChatRequest {
                model: &self.config.model_name,
                messages: &messages,
                temperature: 0.0,
                seed: self.config.seed,
            };
            let body = serde_json::to_value(&request).expect("request serializes");
            let response = self.exchange("chat/completions", body)?;
            let content = chat_content(&response)?;
            match extract_json(&content).and_then(|v| schema::validate(task.kind, &v).map(|_| v)) {
                Ok(value) => return Ok(value),
                Err(err) => {
                    log::debug!("attempt {attempt} for {} rejected: {err}", task.response_schema_id);
                    last_error = err;
                    messages.push(ChatMessage {
                        role: "assistant",
                        content,
                    });
                    messages.push(ChatMessage {
                        role: "user",
                        content: format!(
                            "Your previous response failed validation against `{}`: {last_error}\nRespond again with a single corrected ```json block.",
                            task.response_schema_id
                        ),
                    });
                }
            }
        }
        Err(Error::MalformedLlmOutput(format!(
            "{} after {} attempts: {last_error}",
            task.response_schema_id,
            self.config.max_retries + 1
        )))
    }

    /// Embeds texts through the embeddings endpoint.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let request = EmbeddingRequest {
            model: &self.config.embed_model,
            input: texts,
        };
        let body = serde_json::to_value(&request).expect("request serializes");
        let response = self.exchange("embeddings", body)?;
        let data = response
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::MalformedLlmOutput("embedding response lacks `data`".into()))?;
        let vectors = data
            .iter()
            .map(|item| {
                item.get("embedding")
                    .and_then(Value::as_array)
                    .and_then(|xs| xs.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
                    .ok_or_else(|| Error::MalformedLlmOutput("embedding entry is not a number array".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        if vectors.len() != texts.len() {
            return Err(Error::MalformedLlmOutput(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                vectors.len()
            )));
        }
        Ok(vectors)
    }

    fn exchange(&self, endpoint: &str, body: Value) -> Result<Value> {
        let hash = request_hash(endpoint, &body);
        let path = self.fixture_path(&hash);
        if self.config.mode == LlmMode::Replay {
            return read_fixture(&path, &hash);
        }
        let response = self.send(endpoint, &body)?;
        if self.config.mode == LlmMode::Record {
            write_fixture(
                &path,
                Fixture {
                    request_hash: hash,
                    request: body,
                    response: response.clone(),
                },
            )?;
        }
        Ok(response)
    }

    fn send(&self, endpoint: &str, body: &Value) -> Result<Value> {
        let url = format!("{}/{endpoint}", self.config.base_url.trim_end_matches('/'));
        let timeout = Duration::from_millis(self.config.timeout_ms);
        let _guard = self.in_flight.acquire();
        let mut last = String::new();
        for _ in 0..=self.config.max_retries {
            match self
                .transport
                .post_json(&url, self.config.api_key.as_deref(), body, timeout)
            {
                Ok(v) => return Ok(v),
                Err(e) => last = e,
            }
        }
        Err(Error::LlmUnavailable(format!("{url}: {last}")))
    }

    fn fixture_path(&self, hash: &str) -> PathBuf {
        self.config.fixture_dir.join(format!("{hash}.json"))
    }
}

/// SHA-256 over the endpoint name and the serialized request body.
pub fn request_hash(endpoint: &str, body: &Value) -> String {
    let mut hasher = Sha256::new();
    hasher.update(endpoint.as_bytes());
    hasher.update(b"\n");
    hasher.update(serde_json::to_string(body).expect("value serializes").as_bytes());
    hex::encode(hasher.finalize())
}

fn read_fixture(path: &Path, hash: &str) -> Result<Value> {
    let raw = match std::fs::read_to_string(path) {
        Ok(raw) => raw,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::FixtureMissing(hash.to_string())),
        Err(e) => return Err(Error::io(path, e)),
    };
    let fixture: Fixture = serde_json::from_str(&raw).map_err(|e| Error::SchemaError {
        line: e.line(),
        field: "fixture".into(),
        message: format!("{}: {e}", path.display()),
    })?;
    Ok(fixture.response)
}

fn write_fixture(path: &Path, fixture: Fixture) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(&fixture).expect("fixture serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn chat_content(response: &Value) -> Result<String> {
    response
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| Error::MalformedLlmOutput("response lacks choices[0].message.content".into()))
}

/// Extracts the first fenced code block and parses it as a JSON object. A reply
/// with no fence is accepted only if the whole reply is a JSON object.
pub(crate) fn extract_json(content: &str) -> std::result::Result<Value, String> {
    let body = match content.find("```") {
        Some(start) => {
            let after = &content[start + 3..];
            let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
            let body = &after[body_start..];
            let end = body.find("```").ok_or("unterminated code fence")?;
            &body[..end]
        }
        None => content,
    };
    let value: Value = serde_json::from_str(body.trim()).map_err(|e| format!("invalid JSON: {e}"))?;
    if value.is_object() {
        Ok(value)
    } else {
        Err("response JSON is not an object".into())
    }
}
