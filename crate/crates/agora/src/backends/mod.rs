//! Backend abstraction: chat completion, text embedding, and binary judging.
//!
//! Every backend comes in two providers. Stub providers are pure functions of
//! their inputs (zero latency, no I/O) so full runs are reproducible byte for
//! byte; HTTP providers speak the common `/chat/completions` and
//! `/embeddings` REST shape.

mod http;
mod stub;

pub use http::{HttpChat, HttpEmbedding, HttpJudge};
pub use stub::{StubChat, StubEmbedding, StubJudge, DISAGREEMENT_MARKERS};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("HTTP status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("transport: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("environment variable {0} is not set")]
    MissingApiKey(String),
    #[error("unexpected response shape: {0}")]
    Parse(String),
    #[error("script has no entry for key '{0}'")]
    ScriptKeyMissing(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid backend binding: {0}")]
    Binding(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Chat,
    Embedding,
    Judge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Stub,
    Http,
}

/// Behaviour of the stub chat provider.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StubMode {
    /// Deterministic synthetic discussion turns.
    #[default]
    Synth,
    /// Returns the first 200 characters of the prompt.
    Echo,
    /// Looks responses up in a JSON file keyed by "agent_id#round".
    Script,
}

fn default_dim() -> usize {
    64
}
fn default_max_in_flight() -> usize {
    4
}
fn default_retries() -> u32 {
    3
}
fn default_timeout_s() -> u64 {
    60
}

/// One backend slot in a scenario's registry. A single flat shape keeps the
/// configuration format simple; `violations` reports which fields the chosen
/// provider actually requires.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendBinding {
    pub kind: BackendKind,
    pub provider: ProviderKind,
    #[serde(default)]
    pub mode: StubMode,
    #[serde(default)]
    pub seed_salt: u64,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: u64,
}

impl BackendBinding {
    pub fn stub(kind: BackendKind, seed_salt: u64) -> Self {
        Self {
            kind,
            provider: ProviderKind::Stub,
            mode: StubMode::Synth,
            seed_salt,
            dim: default_dim(),
            script: None,
            base_url: None,
            model: None,
            api_key_env: None,
            max_in_flight: default_max_in_flight(),
            retries: default_retries(),
            timeout_s: default_timeout_s(),
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self.provider {
            ProviderKind::Http => {
                if self.base_url.as_deref().map_or(true, |s| s.trim().is_empty()) {
                    out.push("http provider requires base_url".to_string());
                }
                if self.model.as_deref().map_or(true, |s| s.trim().is_empty()) {
                    out.push("http provider requires model".to_string());
                }
                if self.max_in_flight < 1 {
                    out.push("max_in_flight must be ≥ 1".to_string());
                }
            }
            ProviderKind::Stub => {
                if self.kind == BackendKind::Chat
                    && self.mode == StubMode::Script
                    && self.script.is_none()
                {
                    out.push("script mode requires a script path".to_string());
                }
            }
        }
        if self.kind == BackendKind::Embedding && self.dim < 8 {
            out.push("embedding dim must be ≥ 8".to_string());
        }
        out
    }
}

/// Request metadata the stub providers draw on. Everything a response may
/// depend on travels here explicitly, so stub outputs are pure functions of
/// the request and never parse the rendered prompt.
#[derive(Debug, Clone)]
pub struct ChatMeta {
    pub run_seed: u64,
    pub round: u32,
    pub agent_id: String,
    pub query: String,
    pub last_speaker: Option<String>,
    pub own_previous: Option<String>,
    pub evidence_texts: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub prompt: String,
    pub meta: ChatMeta,
}

#[derive(Debug, Clone)]
pub struct ChatResponse {
    pub text: String,
    pub latency_ms: u64,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

#[derive(Debug, Clone)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f32>>,
    pub latency_ms: u64,
}

pub trait EmbeddingBackend: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<EmbedResponse, BackendError>;
    fn dim(&self) -> usize;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JudgeTask {
    Responsiveness,
    Rebuttal,
}

impl JudgeTask {
    pub fn name(&self) -> &'static str {
        match self {
            JudgeTask::Responsiveness => "responsiveness",
            JudgeTask::Rebuttal => "rebuttal",
        }
    }
}

#[derive(Debug, Clone)]
pub struct JudgeRequest {
    pub task: JudgeTask,
    pub query: String,
    pub prev_speaker: String,
    pub prev_text: String,
    pub curr_speaker: String,
    pub curr_text: String,
}

#[derive(Debug, Clone)]
pub struct JudgeResponse {
    pub label: u8,
    pub parse_failed: bool,
    pub latency_ms: u64,
}

pub trait JudgeBackend: Send + Sync {
    fn judge(&self, req: &JudgeRequest) -> Result<JudgeResponse, BackendError>;
}

/// Instantiates a chat backend from its binding. `base_dir` anchors relative
/// script paths.
pub fn build_chat(
    binding: &BackendBinding,
    base_dir: &std::path::Path,
) -> Result<Box<dyn ChatBackend>, BackendError> {
    if binding.kind != BackendKind::Chat {
        return Err(BackendError::Binding("not a chat binding".to_string()));
    }
    match binding.provider {
        ProviderKind::Stub => Ok(Box::new(StubChat::from_binding(binding, base_dir)?)),
        ProviderKind::Http => Ok(Box::new(HttpChat::from_binding(binding)?)),
    }
}

pub fn build_embedding(binding: &BackendBinding) -> Result<Box<dyn EmbeddingBackend>, BackendError> {
    if binding.kind != BackendKind::Embedding {
        return Err(BackendError::Binding("not an embedding binding".to_string()));
    }
    match binding.provider {
        ProviderKind::Stub => Ok(Box::new(StubEmbedding::new(binding.dim))),
        ProviderKind::Http => Ok(Box::new(HttpEmbedding::from_binding(binding)?)),
    }
}

pub fn build_judge(binding: &BackendBinding) -> Result<Box<dyn JudgeBackend>, BackendError> {
    if binding.kind != BackendKind::Judge {
        return Err(BackendError::Binding("not a judge binding".to_string()));
    }
    match binding.provider {
        ProviderKind::Stub => Ok(Box::new(StubJudge)),
        ProviderKind::Http => Ok(Box::new(HttpJudge::from_binding(binding)?)),
    }
}
