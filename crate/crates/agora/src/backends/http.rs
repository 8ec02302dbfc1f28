//! HTTP providers for the common REST shape exposed by most hosted LLM
//! gateways: POST /chat/completions and POST /embeddings, bearer-token auth.
//!
//! The judge provider is a thin layer over chat: it renders a grading prompt
//! and parses a single binary digit from the reply, retrying the call once
//! before falling back to 0 with a parse flag.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::json;

use super::{
    BackendBinding, BackendError, ChatBackend, ChatRequest, ChatResponse, EmbedResponse,
    EmbeddingBackend, JudgeBackend, JudgeRequest, JudgeResponse, JudgeTask,
};

/// Counting gate that caps concurrent in-flight requests per backend.
struct Gate {
    state: Mutex<usize>,
    cv: Condvar,
    cap: usize,
}

impl Gate {
    fn new(cap: usize) -> Self {
        Self {
            state: Mutex::new(0),
            cv: Condvar::new(),
            cap: cap.max(1),
        }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut in_flight = self.state.lock().unwrap();
        while *in_flight >= self.cap {
            in_flight = self.cv.wait(in_flight).unwrap();
        }
        *in_flight += 1;
        GateGuard { gate: self }
    }
}

struct GateGuard<'a> {
    gate: &'a Gate,
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut in_flight = self.gate.state.lock().unwrap();
        *in_flight -= 1;
        self.gate.cv.notify_one();
    }
}

struct HttpCore {
    client: reqwest::blocking::Client,
    base_url: String,
    model: String,
    api_key: Option<String>,
    retries: u32,
    gate: Gate,
}

impl HttpCore {
    fn from_binding(binding: &BackendBinding) -> Result<Self, BackendError> {
        let base_url = binding
            .base_url
            .as_deref()
            .ok_or_else(|| BackendError::Binding("http provider requires base_url".into()))?
            .trim_end_matches('/')
            .to_string();
        let model = binding
            .model
            .clone()
            .ok_or_else(|| BackendError::Binding("http provider requires model".into()))?;
        let api_key = match &binding.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| BackendError::MissingApiKey(var.clone()))?,
            ),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(binding.timeout_s))
            .build()?;
        Ok(Self {
            client,
            base_url,
            model,
            api_key,
            retries: binding.retries,
            gate: Gate::new(binding.max_in_flight),
        })
    }

    /// POSTs `body` to `path`, retrying transport errors, 429 and 5xx with
    /// exponential backoff. Other statuses fail immediately.
    fn post_json(&self, path: &str, body: &serde_json::Value) -> Result<String, BackendError> {
        let url = format!("{}{}", self.base_url, path);
        let mut last_err: Option<BackendError> = None;
        for attempt in 0..=self.retries {
            if attempt > 0 {
                let backoff = Duration::from_millis(250u64.saturating_mul(1 << (attempt - 1)))
                    .min(Duration::from_secs(4));
                log::warn!(
                    "retrying {url} (attempt {attempt} of {}) after {:?}: {}",
                    self.retries,
                    backoff,
                    last_err
                        .as_ref()
                        .map(|e| e.to_string())
                        .unwrap_or_default()
                );
                std::thread::sleep(backoff);
            }
            let _slot = self.gate.acquire();
            let mut req = self.client.post(&url).json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().unwrap_or_default();
                    if status.is_success() {
                        return Ok(text);
                    }
                    let err = BackendError::Status {
                        status: status.as_u16(),
                        body: text.chars().take(500).collect(),
                    };
                    let retryable = status.as_u16() == 429 || status.is_server_error();
                    if !retryable {
                        return Err(err);
                    }
                    last_err = Some(err);
                }
                Err(e) => last_err = Some(BackendError::Transport(e)),
            }
        }
        Err(last_err.unwrap_or_else(|| BackendError::Parse("no attempt made".into())))
    }
}

#[derive(Deserialize)]
struct ChatCompletionReply {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

pub struct HttpChat {
    core: HttpCore,
}

impl HttpChat {
    pub fn from_binding(binding: &BackendBinding) -> Result<Self, BackendError> {
        Ok(Self {
            core: HttpCore::from_binding(binding)?,
        })
    }
}

impl ChatBackend for HttpChat {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let body = json!({
            "model": self.core.model,
            "temperature": 0.0,
            "messages": [{"role": "user", "content": req.prompt}],
        });
        let started = Instant::now();
        let raw = self.core.post_json("/chat/completions", &body)?;
        let latency_ms = started.elapsed().as_millis() as u64;
        let reply: ChatCompletionReply =
            serde_json::from_str(&raw).map_err(|e| BackendError::Parse(e.to_string()))?;
        let text = reply
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| BackendError::Parse("empty choices".into()))?;
        Ok(ChatResponse { text, latency_ms })
    }
}

#[derive(Deserialize)]
struct EmbeddingReply {
    data: Vec<EmbeddingRow>,
}

#[derive(Deserialize)]
struct EmbeddingRow {
    index: usize,
    embedding: Vec<f32>,
}

pub struct HttpEmbedding {
    core: HttpCore,
    dim: usize,
}

impl HttpEmbedding {
    pub fn from_binding(binding: &BackendBinding) -> Result<Self, BackendError> {
        Ok(Self {
            core: HttpCore::from_binding(binding)?,
            dim: binding.dim,
        })
    }
}

impl EmbeddingBackend for HttpEmbedding {
    fn embed(&self, texts: &[String]) -> Result<EmbedResponse, BackendError> {
        let body = json!({
            "model": self.core.model,
            "input": texts,
        });
        let started = Instant::now();
        let raw = self.core.post_json("/embeddings", &body)?;
        let latency_ms = started.elapsed().as_millis() as u64;
        let reply: EmbeddingReply =
            serde_json::from_str(&raw).map_err(|e| BackendError::Parse(e.to_string()))?;
        if reply.data.len() != texts.len() {
            return Err(BackendError::Parse(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                reply.data.len()
            )));
        }
        let mut rows = reply.data;
        rows.sort_by_key(|r| r.index);
        Ok(EmbedResponse {
            vectors: rows.into_iter().map(|r| r.embedding).collect(),
            latency_ms,
        })
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

pub(crate) fn render_judge_prompt(req: &JudgeRequest) -> String {
    let question = match req.task {
        JudgeTask::Responsiveness => {
            "Does the current turn engage with the earlier turn, by answering it, building on it, or pushing back against it?"
        }
        JudgeTask::Rebuttal => {
            "Does the current turn explicitly dispute or rebut a claim made in the earlier turn?"
        }
    };
    format!(
        "You are scoring one turn of a multi-party discussion.\n\
         Topic under discussion: {query}\n\n\
         Earlier turn, spoken by {prev_speaker}:\n{prev_text}\n\n\
         Current turn, spoken by {curr_speaker}:\n{curr_text}\n\n\
         {question} Answer with the single digit 1 for yes or 0 for no, and nothing else.",
        query = req.query,
        prev_speaker = req.prev_speaker,
        prev_text = req.prev_text,
        curr_speaker = req.curr_speaker,
        curr_text = req.curr_text,
    )
}

/// First unambiguous binary digit in the reply, if any.
pub(crate) fn parse_binary_label(text: &str) -> Option<u8> {
    text.chars().find_map(|c| match c {
        '0' => Some(0),
        '1' => Some(1),
        _ => None,
    })
}

pub struct HttpJudge {
    chat: HttpChat,
}

impl HttpJudge {
    pub fn from_binding(binding: &BackendBinding) -> Result<Self, BackendError> {
        Ok(Self {
            chat: HttpChat::from_binding(binding)?,
        })
    }
}

impl JudgeBackend for HttpJudge {
    fn judge(&self, req: &JudgeRequest) -> Result<JudgeResponse, BackendError> {
        let prompt = render_judge_prompt(req);
        let mut latency_ms = 0;
        for _ in 0..2 {
            let chat_req = ChatRequest {
                prompt: prompt.clone(),
                meta: super::ChatMeta {
                    run_seed: 0,
                    round: 0,
                    agent_id: String::new(),
                    query: req.query.clone(),
                    last_speaker: None,
                    own_previous: None,
                    evidence_texts: vec![],
                },
            };
            let resp = self.chat.complete(&chat_req)?;
            latency_ms += resp.latency_ms;
            if let Some(label) = parse_binary_label(&resp.text) {
                return Ok(JudgeResponse {
                    label,
                    parse_failed: false,
                    latency_ms,
                });
            }
        }
        Ok(JudgeResponse {
            label: 0,
            parse_failed: true,
            latency_ms,
        })
    }
}
