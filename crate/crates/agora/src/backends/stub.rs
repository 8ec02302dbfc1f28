//! Offline providers. All three are pure functions of their inputs: no
//! clocks, no global state, no I/O after construction, latency always 0.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{
    BackendBinding, BackendError, ChatBackend, ChatRequest, ChatResponse, EmbedResponse,
    EmbeddingBackend, JudgeBackend, JudgeRequest, JudgeResponse, JudgeTask, StubMode,
};

/// Lowercase substrings the stub judge treats as signs of pushback.
pub const DISAGREEMENT_MARKERS: [&str; 9] = [
    "disagree",
    "however",
    "but ",
    "on the contrary",
    "overlooks",
    "challenge",
    "object",
    "counter",
    "yet ",
];

fn seed_from(parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p.as_bytes());
        hasher.update([0x1f]);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub struct StubChat {
    mode: StubMode,
    seed_salt: u64,
    script: BTreeMap<String, String>,
}

impl StubChat {
    pub fn synth(seed_salt: u64) -> Self {
        Self {
            mode: StubMode::Synth,
            seed_salt,
            script: BTreeMap::new(),
        }
    }

    pub fn from_binding(binding: &BackendBinding, base_dir: &Path) -> Result<Self, BackendError> {
        let script = match (binding.mode, &binding.script) {
            (StubMode::Script, Some(path)) => {
                let full = if path.is_absolute() {
                    path.clone()
                } else {
                    base_dir.join(path)
                };
                let raw = std::fs::read_to_string(&full)?;
                serde_json::from_str::<BTreeMap<String, String>>(&raw)
                    .map_err(|e| BackendError::Parse(format!("script file: {e}")))?
            }
            (StubMode::Script, None) => {
                return Err(BackendError::Binding(
                    "script mode requires a script path".to_string(),
                ))
            }
            _ => BTreeMap::new(),
        };
        Ok(Self {
            mode: binding.mode,
            seed_salt: binding.seed_salt,
            script,
        })
    }

    fn synth_text(&self, req: &ChatRequest) -> String {
        const OPENERS: [&str; 6] = [
            "From where I stand,",
            "Let us be clear:",
            "My position holds that",
            "On balance,",
            "Looking at the whole picture,",
            "For the record,",
        ];
        const CONCERNS: [&str; 8] = [
            "upkeep costs",
            "seasonal access",
            "long-term stewardship",
            "shared responsibility",
            "practical enforcement",
            "local livelihoods",
            "fair distribution",
            "proven precedent",
        ];
        const REASONS: [&str; 6] = [
            "the trade-offs compound over time",
            "nobody else will carry that burden",
            "the alternative has failed before",
            "it keeps every party at the table",
            "half-measures satisfy no one",
            "the numbers point the same way",
        ];

        let meta = &req.meta;
        let seed = seed_from(&[
            "synth",
            &self.seed_salt.to_string(),
            &meta.run_seed.to_string(),
            &meta.agent_id,
            &meta.round.to_string(),
            &meta.query,
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut sentences: Vec<String> = Vec::new();

        let opener = OPENERS[rng.gen_range(0..OPENERS.len())];
        let concern = CONCERNS[rng.gen_range(0..CONCERNS.len())];
        let topic: String = meta
            .query
            .split_whitespace()
            .take(8)
            .collect::<Vec<_>>()
            .join(" ");
        sentences.push(format!(
            "{opener} on \"{topic}\" the deciding factor is {concern}."
        ));

        if let Some(speaker) = &meta.last_speaker {
            if rng.gen_bool(0.8) {
                let variant = rng.gen_range(0..3u32);
                let reason = REASONS[rng.gen_range(0..REASONS.len())];
                sentences.push(match variant {
                    0 => format!("I hear {speaker}, but I disagree: {reason}."),
                    1 => format!("{speaker} makes a fair point, and I would extend it: {reason}."),
                    _ => format!("However, {speaker} overlooks that {reason}."),
                });
            } else {
                sentences.push("Returning to the substance, the core question remains unsettled.".to_string());
            }
        }

        if !meta.evidence_texts.is_empty() && rng.gen_bool(0.75) {
            let pick = rng.gen_range(0..meta.evidence_texts.len());
            let quote: String = meta.evidence_texts[pick]
                .split_whitespace()
                .take(14)
                .collect::<Vec<_>>()
                .join(" ");
            sentences.push(format!(
                "The record notes: \"{quote}\" and that supports my case."
            ));
        }

        let closing_concern = CONCERNS[rng.gen_range(0..CONCERNS.len())];
        let closing_reason = REASONS[rng.gen_range(0..REASONS.len())];
        sentences.push(format!(
            "In round {} I give extra weight to {closing_concern}, because {closing_reason}.",
            meta.round
        ));

        sentences.join(" ")
    }
}

impl ChatBackend for StubChat {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let text = match self.mode {
            StubMode::Synth => self.synth_text(req),
            StubMode::Echo => req.prompt.chars().take(200).collect(),
            StubMode::Script => {
                let key = format!("{}#{}", req.meta.agent_id, req.meta.round);
                match self.script.get(&key).or_else(|| self.script.get("default")) {
                    Some(text) => text.clone(),
                    None => return Err(BackendError::ScriptKeyMissing(key)),
                }
            }
        };
        Ok(ChatResponse { text, latency_ms: 0 })
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn lowercase_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Signed feature hashing of a bag of words. Each token flips one coordinate
/// up or down by the low bit of its 64-bit FNV-1a hash; the signs make the
/// expected dot product of texts with disjoint vocabularies zero instead of
/// systematically positive. The result is L2-normalised; an empty token list
/// maps to the zero vector.
pub struct StubEmbedding {
    dim: usize,
}

impl StubEmbedding {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 8, "embedding dim must be ≥ 8");
        Self { dim }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let mut acc = vec![0.0f64; self.dim];
        for token in lowercase_tokens(text) {
            let h = fnv1a64(token.as_bytes());
            let idx = ((h >> 1) % self.dim as u64) as usize;
            let sign = if h & 1 == 0 { 1.0 } else { -1.0 };
            acc[idx] += sign;
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            acc.iter().map(|v| (v / norm) as f32).collect()
        } else {
            vec![0.0f32; self.dim]
        }
    }
}

impl EmbeddingBackend for StubEmbedding {
    fn embed(&self, texts: &[String]) -> Result<EmbedResponse, BackendError> {
        Ok(EmbedResponse {
            vectors: texts.iter().map(|t| self.embed_one(t)).collect(),
            latency_ms: 0,
        })
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

/// Lexical surrogate for the LLM judge. Responsiveness is "mentions the
/// previous speaker"; rebuttal is "contains a disagreement marker". An empty
/// current turn scores 0 on both.
pub struct StubJudge;

impl JudgeBackend for StubJudge {
    fn judge(&self, req: &JudgeRequest) -> Result<JudgeResponse, BackendError> {
        let curr = req.curr_text.to_lowercase();
        let label = if curr.trim().is_empty() {
            0
        } else {
            match req.task {
                JudgeTask::Responsiveness => {
                    let speaker = req.prev_speaker.to_lowercase();
                    u8::from(!speaker.is_empty() && curr.contains(&speaker))
                }
                JudgeTask::Rebuttal => {
                    u8::from(DISAGREEMENT_MARKERS.iter().any(|m| curr.contains(m)))
                }
            }
        };
        Ok(JudgeResponse {
            label,
            parse_failed: false,
            latency_ms: 0,
        })
    }
}
