//! Core data model shared by every other module: agents, weights, rule
//! templates, utterances, the shared message pool, and scenario configuration.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backends::BackendBinding;
use crate::scheduler::AdaptiveConfig;

/// The three prompt components whose emphasis is weight-controlled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Component {
    T,
    M,
    D,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::T, Component::M, Component::D];

    pub fn label(&self) -> &'static str {
        match self {
            Component::T => "T",
            Component::M => "M",
            Component::D => "D",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Three-tier discretization of a weight value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Low,
    Mid,
    High,
}

impl Tier {
    pub fn name(&self) -> &'static str {
        match self {
            Tier::Low => "low",
            Tier::Mid => "mid",
            Tier::High => "high",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-component emphasis weights. Every producer keeps components in [0, 2];
/// the type itself does not clamp, so out-of-range values surface in
/// validation instead of being silently corrected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub t: f64,
    pub m: f64,
    pub d: f64,
}

impl WeightVector {
    pub const RANGE: (f64, f64) = (0.0, 2.0);

    pub fn new(t: f64, m: f64, d: f64) -> Self {
        Self { t, m, d }
    }

    pub fn uniform(w: f64) -> Self {
        Self::new(w, w, w)
    }

    pub fn get(&self, c: Component) -> f64 {
        match c {
            Component::T => self.t,
            Component::M => self.m,
            Component::D => self.d,
        }
    }

    pub fn with(&self, c: Component, value: f64) -> Self {
        let mut out = *self;
        match c {
            Component::T => out.t = value,
            Component::M => out.m = value,
            Component::D => out.d = value,
        }
        out
    }

    pub fn in_range(&self) -> bool {
        [self.t, self.m, self.d]
            .iter()
            .all(|w| (Self::RANGE.0..=Self::RANGE.1).contains(w))
    }

    /// Range violations as human-readable strings, empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, w) in [("w_T", self.t), ("w_M", self.m), ("w_D", self.d)] {
            if !(Self::RANGE.0..=Self::RANGE.1).contains(&w) || w.is_nan() {
                out.push(format!("{name} out of [0,2]"));
            }
        }
        out
    }
}

impl Default for WeightVector {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

/// Optional structural instruction governing response format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RuleTemplate {
    None,
    Light { sentence_limit: u32 },
    Struct,
}

impl RuleTemplate {
    pub const DEFAULT_SENTENCE_LIMIT: u32 = 5;

    pub fn name(&self) -> &'static str {
        match self {
            RuleTemplate::None => "none",
            RuleTemplate::Light { .. } => "light",
            RuleTemplate::Struct => "struct",
        }
    }

    pub fn light() -> Self {
        RuleTemplate::Light {
            sentence_limit: Self::DEFAULT_SENTENCE_LIMIT,
        }
    }
}

impl fmt::Display for RuleTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which information blocks are assembled into the prompt. Omitting a block
/// removes it entirely, which is distinct from a weight of zero (the block
/// stays, carrying the low-tier instruction).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockMask {
    pub t: bool,
    pub m: bool,
    pub d: bool,
}

impl BlockMask {
    pub fn full() -> Self {
        Self { t: true, m: true, d: true }
    }

    pub fn includes(&self, c: Component) -> bool {
        match c {
            Component::T => self.t,
            Component::M => self.m,
            Component::D => self.d,
        }
    }

    /// Short tag like "TMD", "TD" or "-" (no blocks), used in labels.
    pub fn tag(&self) -> String {
        let mut s = String::new();
        if self.t {
            s.push('T');
        }
        if self.m {
            s.push('M');
        }
        if self.d {
            s.push('D');
        }
        if s.is_empty() {
            s.push('-');
        }
        s
    }
}

impl Default for BlockMask {
    fn default() -> Self {
        Self::full()
    }
}

/// The policy parameters of one agent: rule template plus weight vector
/// with its adaptive settings, and the block mask used by ablations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub rule: RuleTemplate,
    pub weights: WeightVector,
    #[serde(default)]
    pub adaptive: AdaptiveConfig,
    #[serde(default)]
    pub mask: BlockMask,
}

impl Default for PolicySpec {
    fn default() -> Self {
        Self {
            rule: RuleTemplate::None,
            weights: WeightVector::default(),
            adaptive: AdaptiveConfig::default(),
            mask: BlockMask::full(),
        }
    }
}

/// One discussion participant: persona/task block, knowledge base reference,
/// chat backend binding, and its policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub id: String,
    pub persona_task: String,
    pub knowledge_ref: String,
    pub backend_ref: String,
    pub policy: PolicySpec,
}

/// How the responsiveness half of behaviour feedback is obtained while a
/// dialogue is running.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackMode {
    /// Cheap offline check: the response mentions the previous speaker or
    /// quotes four or more consecutive words from the previous utterance.
    #[default]
    Lexical,
    /// Ask the judge backend during the run.
    Judge,
}

/// A fully resolved, single-query scenario: everything the engine needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub query: String,
    pub rounds: u32,
    pub retrieval_n: usize,
    pub memory_window: usize,
    pub seed: u64,
    pub agents: Vec<AgentSpec>,
    #[serde(default)]
    pub sequential: bool,
    #[serde(default)]
    pub feedback_mode: FeedbackMode,
    pub embed_backend: String,
    #[serde(default)]
    pub judge_backend: Option<String>,
    pub backends: BTreeMap<String, BackendBinding>,
}

impl ScenarioConfig {
    /// Default memory window: the last two full rounds.
    pub fn default_memory_window(n_agents: usize) -> usize {
        n_agents * 2
    }
}

/// One produced utterance together with the snapshots needed to replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub round: u32,
    pub agent_id: String,
    pub text: String,
    pub prompt_snapshot: String,
    pub weights_snapshot: WeightVector,
    pub evidence_ids: Vec<String>,
}

/// The shared message pool: an append-only, round-ordered list of utterances
/// visible to every agent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DialogueMemory {
    utterances: Vec<Utterance>,
}

impl DialogueMemory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends one utterance. Rounds must be non-decreasing.
    pub fn append(&mut self, u: Utterance) {
        if let Some(last) = self.utterances.last() {
            assert!(
                u.round >= last.round,
                "memory is append-only in round order (got round {} after {})",
                u.round,
                last.round
            );
        }
        self.utterances.push(u);
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// The most recent `n` utterances, oldest first.
    pub fn window(&self, n: usize) -> &[Utterance] {
        let start = self.utterances.len().saturating_sub(n);
        &self.utterances[start..]
    }

    /// Serializes utterances as "agent_id: text" lines, newest last. This is
    /// both the retrieval query text for later rounds and the format of the
    /// prompt's memory block.
    pub fn serialize_all(&self) -> String {
        serialize_utterances(&self.utterances)
    }
}

pub fn serialize_utterances(utterances: &[Utterance]) -> String {
    let lines: Vec<String> = utterances
        .iter()
        .map(|u| format!("{}: {}", u.agent_id, u.text))
        .collect();
    lines.join("\n")
}

/// The per-round view an agent acts from: persona/task, the shared query,
/// the recent memory window, and the retrieved evidence.
#[derive(Debug, Clone, Copy)]
pub struct AgentState<'a> {
    pub agent_id: &'a str,
    pub persona_task: &'a str,
    pub query: &'a str,
    pub memory_window: &'a [Utterance],
    pub evidence: &'a crate::knowledge::RetrievedEvidence,
}

/// One labelled section of a constructed prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBlock {
    pub label: String,
    pub micro: Option<String>,
    pub body: String,
}

/// The constructed prompt: an ordered list of blocks plus the flattened text
/// that is sent to the chat backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptAction {
    pub preamble: String,
    pub blocks: Vec<PromptBlock>,
    pub rendered_text: String,
}

impl PromptAction {
    /// Deterministic flattening: preamble, then each block as
    /// `label \n [micro \n] body`, blocks separated by blank lines.
    pub fn render(preamble: &str, blocks: &[PromptBlock]) -> String {
        let mut parts = Vec::with_capacity(blocks.len() + 1);
        if !preamble.is_empty() {
            parts.push(preamble.to_string());
        }
        for b in blocks {
            let mut s = String::new();
            s.push_str(&b.label);
            s.push('\n');
            if let Some(micro) = &b.micro {
                s.push_str(micro);
                s.push('\n');
            }
            s.push_str(&b.body);
            parts.push(s);
        }
        parts.join("\n\n")
    }
}

/// What the agent did in the previous round, as seen by the weight scheduler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorFeedback {
    pub used_evidence: bool,
    pub responded_to_memory: bool,
}

/// Checks every scenario invariant and returns the violations found.
/// A valid configuration yields an empty list.
pub fn validate_scenario(config: &ScenarioConfig) -> Vec<String> {
    let mut violations = Vec::new();

    if config.rounds < 1 {
        violations.push("rounds must be ≥ 1".to_string());
    }
    if config.retrieval_n < 1 {
        violations.push("retrieval_n must be ≥ 1".to_string());
    }
    if config.memory_window < 1 {
        violations.push("memory_window must be ≥ 1".to_string());
    }
    if config.query.trim().is_empty() {
        violations.push("query is empty".to_string());
    }
    if config.agents.is_empty() {
        violations.push("agents list is empty".to_string());
    } else if config.agents.len() < 2 {
        violations.push("at least 2 agents are required".to_string());
    }

    let mut seen_ids = std::collections::BTreeSet::new();
    for (idx, agent) in config.agents.iter().enumerate() {
        let ctx = format!("agents[{idx}] ({})", agent.id);
        if agent.id.trim().is_empty() {
            violations.push(format!("agents[{idx}]: id is empty"));
        }
        if !seen_ids.insert(agent.id.clone()) {
            violations.push(format!("{ctx}: duplicate agent_id"));
        }
        if agent.persona_task.trim().is_empty() {
            violations.push(format!("{ctx}: persona_task is empty"));
        }
        if agent.knowledge_ref.trim().is_empty() {
            violations.push(format!("{ctx}: knowledge_ref is empty"));
        }
        match config.backends.get(&agent.backend_ref) {
            None => violations.push(format!(
                "{ctx}: backend_ref '{}' not found in backend registry",
                agent.backend_ref
            )),
            Some(b) if b.kind != crate::backends::BackendKind::Chat => violations.push(format!(
                "{ctx}: backend_ref '{}' is not a chat backend",
                agent.backend_ref
            )),
            Some(_) => {}
        }
        for v in agent.policy.weights.violations() {
            violations.push(format!("{ctx}: {v}"));
        }
        if let RuleTemplate::Light { sentence_limit } = agent.policy.rule {
            if sentence_limit < 1 {
                violations.push(format!("{ctx}: light sentence_limit must be ≥ 1"));
            }
        }
        let ad = &agent.policy.adaptive;
        if !(ad.alpha > 0.0 && ad.alpha <= 2.0) {
            violations.push(format!("{ctx}: adaptive alpha must be in (0,2]"));
        }
        if !(ad.trend_step > 0.0 && ad.trend_step <= 1.0) {
            violations.push(format!("{ctx}: adaptive trend_step must be in (0,1]"));
        }
    }

    match config.backends.get(&config.embed_backend) {
        None => violations.push(format!(
            "embed_backend '{}' not found in backend registry",
            config.embed_backend
        )),
        Some(b) if b.kind != crate::backends::BackendKind::Embedding => violations.push(format!(
            "embed_backend '{}' is not an embedding backend",
            config.embed_backend
        )),
        Some(_) => {}
    }
    if let Some(judge) = &config.judge_backend {
        match config.backends.get(judge) {
            None => violations.push(format!(
                "judge_backend '{judge}' not found in backend registry"
            )),
            Some(b) if b.kind != crate::backends::BackendKind::Judge => {
                violations.push(format!("judge_backend '{judge}' is not a judge backend"))
            }
            Some(_) => {}
        }
    } else if config.feedback_mode == FeedbackMode::Judge {
        violations.push("feedback_mode is 'judge' but no judge_backend is set".to_string());
    }

    for (id, binding) in &config.backends {
        for v in binding.violations() {
            violations.push(format!("backends[{id}]: {v}"));
        }
    }

    violations
}
