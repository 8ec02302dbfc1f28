//! The dialogue loop: runs a configured scenario round by round, producing a
//! transcript entry per turn and a log of every backend call.
//!
//! Rounds are simultaneous by default: all agents of round k see the pool as
//! it stood after round k-1, and the round's outputs join the pool only once
//! the round completes. The sequential flag switches to turn-by-turn
//! visibility within a round.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{
    build_chat, build_embedding, build_judge, BackendError, ChatBackend, ChatMeta, ChatRequest,
    EmbeddingBackend, JudgeBackend, JudgeRequest, JudgeTask,
};
use crate::domain::{
    validate_scenario, AgentState, BehaviorFeedback, DialogueMemory, FeedbackMode, ScenarioConfig,
    Tier, Utterance, WeightVector,
};
use crate::knowledge::{EvidenceItem, KnowledgeError, KnowledgeIndex, RetrievedEvidence};
use crate::metrics::{evidence_usage, shared_raw_run_at_least, DEFAULT_EVIDENCE_NGRAM};
use crate::policy::{build_action, PromptStyle};
use crate::scheduler::{tier_triple, weights_for_round, SchedulerError};

/// Retrieval query texts longer than this are cut before embedding; the
/// transcript records when that happened.
pub const MAX_EMBED_CHARS: usize = 8000;

/// Raw-token run length that counts as quoting the previous speaker in the
/// lexical responsiveness fallback.
pub const LEXICAL_QUOTE_RUN: usize = 4;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error("knowledge: {0}")]
    Knowledge(#[from] KnowledgeError),
    #[error("scheduler: {0}")]
    Scheduler(#[from] SchedulerError),
    #[error("no chat backend built for '{0}'")]
    MissingBackend(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierTriple {
    pub t: Tier,
    pub m: Tier,
    pub d: Tier,
}

/// One turn as persisted to the transcript JSONL. Contains everything needed
/// to rebuild the prompt offline: weights, tiers, mask, evidence with text,
/// and the outputs of earlier turns (via the other entries).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub run_id: String,
    pub round: u32,
    pub agent_id: String,
    pub rule: String,
    pub weights: WeightVector,
    pub tiers: TierTriple,
    pub mask: String,
    pub evidence: Vec<EvidenceItem>,
    pub retrieval_query_sha256: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated_query: bool,
    pub prompt: String,
    pub output: String,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<BehaviorFeedback>,
}

/// One backend invocation: what was asked (as a hash) and what came back.
/// Chat and judge responses are stored in full; embedding responses as a
/// shape-plus-digest descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub role: String,
    pub backend_id: String,
    pub request_sha256: String,
    pub response: serde_json::Value,
    pub latency_ms: u64,
}

pub struct RunOutput {
    pub run_id: String,
    pub entries: Vec<TranscriptEntry>,
    pub calls: Vec<CallRecord>,
}

/// The live backends a run talks to, keyed the way the scenario refers to
/// them.
pub struct BackendSet {
    pub chats: BTreeMap<String, Box<dyn ChatBackend>>,
    pub embed: Box<dyn EmbeddingBackend>,
    pub embed_id: String,
    pub judge: Option<Box<dyn JudgeBackend>>,
    pub judge_id: Option<String>,
}

impl BackendSet {
    /// Instantiates every backend the scenario references. `base_dir`
    /// anchors relative paths in bindings (script files).
    pub fn build(cfg: &ScenarioConfig, base_dir: &Path) -> Result<Self, EngineError> {
        let mut chats: BTreeMap<String, Box<dyn ChatBackend>> = BTreeMap::new();
        for agent in &cfg.agents {
            if !chats.contains_key(&agent.backend_ref) {
                let binding = cfg
                    .backends
                    .get(&agent.backend_ref)
                    .ok_or_else(|| EngineError::MissingBackend(agent.backend_ref.clone()))?;
                chats.insert(agent.backend_ref.clone(), build_chat(binding, base_dir)?);
            }
        }
        let embed_binding = cfg
            .backends
            .get(&cfg.embed_backend)
            .ok_or_else(|| EngineError::MissingBackend(cfg.embed_backend.clone()))?;
        let embed = build_embedding(embed_binding)?;
        let (judge, judge_id) = match &cfg.judge_backend {
            Some(id) => {
                let binding = cfg
                    .backends
                    .get(id)
                    .ok_or_else(|| EngineError::MissingBackend(id.clone()))?;
                (Some(build_judge(binding)?), Some(id.clone()))
            }
            None => (None, None),
        };
        Ok(Self {
            chats,
            embed,
            embed_id: cfg.embed_backend.clone(),
            judge,
            judge_id,
        })
    }
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

/// Stable per-run seed derived from the base seed and the run id.
pub fn derive_run_seed(base_seed: u64, run_id: &str) -> u64 {
    let digest = Sha256::digest(format!("{base_seed}|{run_id}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn truncate_chars(text: &str, max_chars: usize) -> (String, bool) {
    let mut count = 0usize;
    for (byte_idx, _) in text.char_indices() {
        if count == max_chars {
            return (text[..byte_idx].to_string(), true);
        }
        count += 1;
    }
    (text.to_string(), false)
}

fn embed_response_descriptor(vectors: &[Vec<f32>]) -> serde_json::Value {
    let mut bytes = Vec::new();
    for v in vectors {
        for x in v {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    serde_json::json!({
        "count": vectors.len(),
        "dim": vectors.first().map_or(0, |v| v.len()),
        "sha256": sha256_hex(&bytes),
    })
}

/// The utterance an agent was expected to react to: the latest earlier entry
/// by a different agent, restricted to earlier rounds unless `sequential`.
pub(crate) fn previous_counterpart<'a>(
    entries: &'a [TranscriptEntry],
    upto: usize,
    agent_id: &str,
    round: u32,
    sequential: bool,
) -> Option<&'a TranscriptEntry> {
    entries[..upto]
        .iter()
        .rev()
        .find(|e| e.agent_id != agent_id && (sequential || e.round < round))
}

struct FeedbackOutcome {
    feedback: BehaviorFeedback,
    calls: Vec<CallRecord>,
}

/// Derives behaviour feedback about the agent's previous-round turn. Both
/// bits default to true when there was nothing to use or respond to, so
/// corrections only fire on genuine misses.
fn compute_feedback(
    cfg: &ScenarioConfig,
    backends: &BackendSet,
    entries: &[TranscriptEntry],
    agent_id: &str,
    round: u32,
) -> Result<FeedbackOutcome, EngineError> {
    let prev_round = round - 1;
    let own_idx = entries
        .iter()
        .position(|e| e.agent_id == agent_id && e.round == prev_round)
        .expect("feedback requested without a previous turn");
    let own = &entries[own_idx];

    let used_evidence = if own.evidence.is_empty() {
        true
    } else {
        let texts: Vec<String> = own.evidence.iter().map(|e| e.text.clone()).collect();
        evidence_usage(&own.output, &texts, DEFAULT_EVIDENCE_NGRAM) == 1
    };

    let mut calls = Vec::new();
    let responded_to_memory = if prev_round == 1 {
        true
    } else {
        match previous_counterpart(entries, own_idx, agent_id, prev_round, cfg.sequential) {
            None => true,
            Some(prev) => match cfg.feedback_mode {
                FeedbackMode::Lexical => {
                    let mentions = own
                        .output
                        .to_lowercase()
                        .contains(&prev.agent_id.to_lowercase());
                    mentions
                        || shared_raw_run_at_least(&own.output, &prev.output, LEXICAL_QUOTE_RUN)
                }
                FeedbackMode::Judge => {
                    let judge = backends
                        .judge
                        .as_deref()
                        .ok_or_else(|| EngineError::MissingBackend("judge".to_string()))?;
                    let req = JudgeRequest {
                        task: JudgeTask::Responsiveness,
                        query: cfg.query.clone(),
                        prev_speaker: prev.agent_id.clone(),
                        prev_text: prev.output.clone(),
                        curr_speaker: agent_id.to_string(),
                        curr_text: own.output.clone(),
                    };
                    let resp = judge.judge(&req)?;
                    calls.push(CallRecord {
                        role: "judge".to_string(),
                        backend_id: backends.judge_id.clone().unwrap_or_default(),
                        request_sha256: sha256_hex(
                            format!(
                                "responsiveness\x1f{}\x1f{}",
                                req.prev_text, req.curr_text
                            )
                            .as_bytes(),
                        ),
                        response: serde_json::json!({
                            "label": resp.label,
                            "parse_failed": resp.parse_failed,
                        }),
                        latency_ms: resp.latency_ms,
                    });
                    resp.label == 1
                }
            },
        }
    };

    Ok(FeedbackOutcome {
        feedback: BehaviorFeedback {
            used_evidence,
            responded_to_memory,
        },
        calls,
    })
}

/// Runs one full dialogue. Deterministic for stub backends: equal inputs
/// yield byte-identical transcripts.
pub fn run_dialogue(
    cfg: &ScenarioConfig,
    index: &KnowledgeIndex,
    backends: &BackendSet,
    style: &PromptStyle,
    run_id: &str,
    run_seed: u64,
) -> Result<RunOutput, EngineError> {
    let violations = validate_scenario(cfg);
    if !violations.is_empty() {
        return Err(EngineError::Invalid(violations.join("; ")));
    }

    let mut memory = DialogueMemory::new();
    let mut entries: Vec<TranscriptEntry> = Vec::new();
    let mut calls: Vec<CallRecord> = Vec::new();

    for round in 1..=cfg.rounds {
        let query_text = if round == 1 {
            cfg.query.clone()
        } else {
            memory.serialize_all()
        };
        let (embed_text, truncated) = truncate_chars(&query_text, MAX_EMBED_CHARS);
        let query_sha = sha256_hex(embed_text.as_bytes());
        let embed_input = vec![embed_text];
        let embedded = backends.embed.embed(&embed_input)?;
        calls.push(CallRecord {
            role: "embed".to_string(),
            backend_id: backends.embed_id.clone(),
            request_sha256: sha256_hex(embed_input.join("\x1e").as_bytes()),
            response: embed_response_descriptor(&embedded.vectors),
            latency_ms: embedded.latency_ms,
        });
        let query_vec = &embedded.vectors[0];

        let mut round_utterances: Vec<Utterance> = Vec::new();

        for agent in &cfg.agents {
            let feedback = if round == 1 {
                None
            } else {
                let outcome = compute_feedback(cfg, backends, &entries, &agent.id, round)?;
                calls.extend(outcome.calls);
                Some(outcome.feedback)
            };
            let weights =
                weights_for_round(&agent.policy.weights, round, feedback, &agent.policy.adaptive);
            let (tier_t, tier_m, tier_d) = tier_triple(&weights)?;

            let base = index.base(&agent.knowledge_ref)?;
            let items = base.retrieve(query_vec, cfg.retrieval_n);
            let evidence = RetrievedEvidence {
                items,
                query_sha256: query_sha.clone(),
                truncated_query: truncated,
            };

            let window = memory.window(cfg.memory_window);
            let state = AgentState {
                agent_id: &agent.id,
                persona_task: &agent.persona_task,
                query: &cfg.query,
                memory_window: window,
                evidence: &evidence,
            };
            let action = build_action(&state, &weights, &agent.policy.rule, &agent.policy.mask, style)?;

            let last_speaker = window
                .iter()
                .rev()
                .find(|u| u.agent_id != agent.id)
                .map(|u| u.agent_id.clone());
            let own_previous = memory
                .utterances()
                .iter()
                .rev()
                .find(|u| u.agent_id == agent.id)
                .map(|u| u.text.clone());
            let evidence_texts: Vec<String> =
                evidence.items.iter().map(|e| e.text.clone()).collect();

            let chat = backends
                .chats
                .get(&agent.backend_ref)
                .ok_or_else(|| EngineError::MissingBackend(agent.backend_ref.clone()))?;
            let request = ChatRequest {
                prompt: action.rendered_text.clone(),
                meta: ChatMeta {
                    run_seed,
                    round,
                    agent_id: agent.id.clone(),
                    query: cfg.query.clone(),
                    last_speaker,
                    own_previous,
                    evidence_texts,
                },
            };
            let response = chat.complete(&request)?;
            calls.push(CallRecord {
                role: "chat".to_string(),
                backend_id: agent.backend_ref.clone(),
                request_sha256: sha256_hex(request.prompt.as_bytes()),
                response: serde_json::Value::String(response.text.clone()),
                latency_ms: response.latency_ms,
            });

            entries.push(TranscriptEntry {
                run_id: run_id.to_string(),
                round,
                agent_id: agent.id.clone(),
                rule: agent.policy.rule.name().to_string(),
                weights,
                tiers: TierTriple { t: tier_t, m: tier_m, d: tier_d },
                mask: agent.policy.mask.tag(),
                evidence: evidence.items.clone(),
                retrieval_query_sha256: query_sha.clone(),
                truncated_query: truncated,
                prompt: action.rendered_text,
                output: response.text.clone(),
                latency_ms: response.latency_ms,
                feedback,
            });

            let utterance = Utterance {
                round,
                agent_id: agent.id.clone(),
                text: response.text,
                prompt_snapshot: String::new(),
                weights_snapshot: weights,
                evidence_ids: evidence.items.iter().map(|e| e.chunk_id.clone()).collect(),
            };
            if cfg.sequential {
                memory.append(utterance);
            } else {
                round_utterances.push(utterance);
            }
        }

        for u in round_utterances {
            memory.append(u);
        }
    }

    Ok(RunOutput {
        run_id: run_id.to_string(),
        entries,
        calls,
    })
}

pub fn render_transcript_jsonl(entries: &[TranscriptEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("transcript entries serialize"));
        out.push('\n');
    }
    out
}

pub fn parse_transcript_jsonl(src: &str) -> Result<Vec<TranscriptEntry>, serde_json::Error> {
    src.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

pub fn render_calls_jsonl(calls: &[CallRecord]) -> String {
    let mut out = String::new();
    for c in calls {
        out.push_str(&serde_json::to_string(c).expect("call records serialize"));
        out.push('\n');
    }
    out
}

/// Rebuilds every prompt of a finished run from the recorded weights,
/// evidence and earlier outputs, and compares against the recorded prompt.
/// Returns the first mismatch found, if any.
pub fn replay_check(
    cfg: &ScenarioConfig,
    style: &PromptStyle,
    entries: &[TranscriptEntry],
) -> Result<(), String> {
    let mut memory = DialogueMemory::new();
    let mut pending: Vec<Utterance> = Vec::new();
    let mut current_round = 0u32;

    for (i, entry) in entries.iter().enumerate() {
        if entry.round != current_round {
            if entry.round != current_round + 1 {
                return Err(format!(
                    "entry {i}: round jumps from {current_round} to {}",
                    entry.round
                ));
            }
            for u in pending.drain(..) {
                memory.append(u);
            }
            current_round = entry.round;
        }

        let agent = cfg
            .agents
            .iter()
            .find(|a| a.id == entry.agent_id)
            .ok_or_else(|| format!("entry {i}: unknown agent '{}'", entry.agent_id))?;

        let evidence = RetrievedEvidence {
            items: entry.evidence.clone(),
            query_sha256: entry.retrieval_query_sha256.clone(),
            truncated_query: entry.truncated_query,
        };
        let window = memory.window(cfg.memory_window);
        let state = AgentState {
            agent_id: &entry.agent_id,
            persona_task: &agent.persona_task,
            query: &cfg.query,
            memory_window: window,
            evidence: &evidence,
        };
        let action = build_action(&state, &entry.weights, &agent.policy.rule, &agent.policy.mask, style)
            .map_err(|e| format!("entry {i}: {e}"))?;
        if action.rendered_text != entry.prompt {
            return Err(format!(
                "entry {i} (round {}, agent {}): rebuilt prompt differs from recorded prompt",
                entry.round, entry.agent_id
            ));
        }

        let utterance = Utterance {
            round: entry.round,
            agent_id: entry.agent_id.clone(),
            text: entry.output.clone(),
            prompt_snapshot: String::new(),
            weights_snapshot: entry.weights,
            evidence_ids: entry.evidence.iter().map(|e| e.chunk_id.clone()).collect(),
        };
        if cfg.sequential {
            memory.append(utterance);
        } else {
            pending.push(utterance);
        }
    }
    Ok(())
}
