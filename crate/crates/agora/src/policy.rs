//! Prompt construction: maps an agent's state and weight tiers to the text
//! sent to the chat backend.
//!
//! A prompt is a fixed sequence of labelled blocks. [T] persona and task,
//! [Q] the shared question, [M] the recent discussion window, [D] retrieved
//! evidence, and optionally [R] a structural rule. The T, M and D blocks each
//! carry a tier-selected micro-instruction directly under their label, so a
//! weight change alters exactly one line of the prompt and nothing else.

use serde::Deserialize;

use crate::domain::{
    serialize_utterances, AgentState, BlockMask, Component, PromptAction, PromptBlock,
    RuleTemplate, Tier, WeightVector,
};
use crate::scheduler::{tier_triple, SchedulerError};

pub const LIGHT_RULE_TEMPLATE: &str = "First directly answer [Q], then provide 1\u{2013}2 pieces of evidence from [D]; respond to [M] if necessary; limit the response to at most {N} sentences.";

pub const STRUCT_RULE_TEXT: &str = "First extract four types of key points in order (no more than 3 each) from [M]: 1) arguments supporting the goal, 2) arguments threatening the goal, 3) unresolved points of conflict, 4) potential opportunities for cooperation; then generate a response of no more than 3 sentences based on these points, giving priority to citing [D].";

const T_LOW: &str = "You may keep the [T] perspective implicit; focus on arguments.";
const T_MID: &str = "Reflect the [T] perspective and state your position when appropriate.";
const T_HIGH: &str = "Speak explicitly from the [T] perspective. First state your stance and role-specific priority, then justify with reasons.";

const M_LOW: &str = "You may respond without summarising [M]; avoid verbatim repetition.";
const M_MID: &str = "Consider the recent discussion [M] and avoid repeating earlier content.";
const M_HIGH: &str = "Begin with a 1\u{2013}2 sentence summary of the recent turns in [M] and address unresolved points directly.";

const D_LOW: &str = "Evidence (Optional): You may proceed without citing retrieved snippets [D] if not essential.";
const D_MID: &str = "Evidence (Preferred): Use relevant retrieved snippets [D] to support key claims when available.";
const D_HIGH: &str = "Before concluding, list at least 2 concrete evidence points from the retrieved snippets [D]; quote/paraphrase and tie them to your claims.";

pub const DEFAULT_PREAMBLE_TEMPLATE: &str =
    "You are agent \"{id}\". Stay in character and follow the instructions in each section.";

pub const EMPTY_MEMORY_BODY: &str = "(no prior discussion)";
pub const EMPTY_EVIDENCE_BODY: &str = "(no evidence retrieved)";

/// The nine tier-conditioned micro-instructions, indexed by component and
/// tier. Defaults are fixed; individual entries can be overridden from a
/// TOML fragment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionTable {
    entries: [[String; 3]; 3],
}

fn c_index(c: Component) -> usize {
    match c {
        Component::T => 0,
        Component::M => 1,
        Component::D => 2,
    }
}

fn t_index(t: Tier) -> usize {
    match t {
        Tier::Low => 0,
        Tier::Mid => 1,
        Tier::High => 2,
    }
}

impl Default for InstructionTable {
    fn default() -> Self {
        let s = |x: &str| x.to_string();
        Self {
            entries: [
                [s(T_LOW), s(T_MID), s(T_HIGH)],
                [s(M_LOW), s(M_MID), s(M_HIGH)],
                [s(D_LOW), s(D_MID), s(D_HIGH)],
            ],
        }
    }
}

#[derive(Debug, Default, Deserialize)]
struct TierOverride {
    low: Option<String>,
    mid: Option<String>,
    high: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
struct TableOverride {
    t: Option<TierOverride>,
    m: Option<TierOverride>,
    d: Option<TierOverride>,
}

impl InstructionTable {
    pub fn instruction(&self, c: Component, tier: Tier) -> &str {
        &self.entries[c_index(c)][t_index(tier)]
    }

    pub fn set(&mut self, c: Component, tier: Tier, text: String) {
        self.entries[c_index(c)][t_index(tier)] = text;
    }

    /// Defaults with selected entries replaced from a TOML fragment of the
    /// shape `[t] high = "..."` / `[m] low = "..."` / `[d] mid = "..."`.
    pub fn with_overrides_toml(toml_src: &str) -> Result<Self, toml::de::Error> {
        let over: TableOverride = toml::from_str(toml_src)?;
        let mut table = Self::default();
        let sections = [
            (Component::T, over.t),
            (Component::M, over.m),
            (Component::D, over.d),
        ];
        for (c, section) in sections {
            if let Some(sec) = section {
                for (tier, text) in [
                    (Tier::Low, sec.low),
                    (Tier::Mid, sec.mid),
                    (Tier::High, sec.high),
                ] {
                    if let Some(text) = text {
                        table.set(c, tier, text);
                    }
                }
            }
        }
        Ok(table)
    }
}

/// Presentation settings shared by all agents of a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptStyle {
    /// Preamble with an `{id}` placeholder for the agent id.
    pub preamble_template: String,
    pub instructions: InstructionTable,
}

impl Default for PromptStyle {
    fn default() -> Self {
        Self {
            preamble_template: DEFAULT_PREAMBLE_TEMPLATE.to_string(),
            instructions: InstructionTable::default(),
        }
    }
}

/// Text of the [R] block for a rule, None for the bare template.
pub fn rule_text(rule: &RuleTemplate) -> Option<String> {
    match rule {
        RuleTemplate::None => None,
        RuleTemplate::Light { sentence_limit } => {
            Some(LIGHT_RULE_TEMPLATE.replace("{N}", &sentence_limit.to_string()))
        }
        RuleTemplate::Struct => Some(STRUCT_RULE_TEXT.to_string()),
    }
}

/// Builds the prompt for one turn. Pure: equal inputs produce an identical
/// action, and each input field feeds exactly one block, so two states that
/// differ in one element yield prompts differing only in that block (plus
/// the micro line of a component whose tier changed).
pub fn build_action(
    state: &AgentState,
    weights: &WeightVector,
    rule: &RuleTemplate,
    mask: &BlockMask,
    style: &PromptStyle,
) -> Result<PromptAction, SchedulerError> {
    let (tier_t, tier_m, tier_d) = tier_triple(weights)?;
    let mut blocks: Vec<PromptBlock> = Vec::with_capacity(5);

    if mask.t {
        blocks.push(PromptBlock {
            label: "[T]".to_string(),
            micro: Some(style.instructions.instruction(Component::T, tier_t).to_string()),
            body: state.persona_task.to_string(),
        });
    }

    blocks.push(PromptBlock {
        label: "[Q]".to_string(),
        micro: None,
        body: state.query.to_string(),
    });

    if mask.m {
        let body = if state.memory_window.is_empty() {
            EMPTY_MEMORY_BODY.to_string()
        } else {
            serialize_utterances(state.memory_window)
        };
        blocks.push(PromptBlock {
            label: "[M]".to_string(),
            micro: Some(style.instructions.instruction(Component::M, tier_m).to_string()),
            body,
        });
    }

    if mask.d {
        let body = if state.evidence.items.is_empty() {
            EMPTY_EVIDENCE_BODY.to_string()
        } else {
            state
                .evidence
                .items
                .iter()
                .map(|item| format!("[{}] {}", item.chunk_id, item.text))
                .collect::<Vec<_>>()
                .join("\n")
        };
        blocks.push(PromptBlock {
            label: "[D]".to_string(),
            micro: Some(style.instructions.instruction(Component::D, tier_d).to_string()),
            body,
        });
    }

    if let Some(rtext) = rule_text(rule) {
        blocks.push(PromptBlock {
            label: "[R]".to_string(),
            micro: None,
            body: rtext,
        });
    }

    let preamble = style.preamble_template.replace("{id}", state.agent_id);
    let rendered_text = PromptAction::render(&preamble, &blocks);
    Ok(PromptAction {
        preamble,
        blocks,
        rendered_text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Utterance;
    use crate::knowledge::{EvidenceItem, RetrievedEvidence};
    use proptest::prelude::*;

    fn evidence(items: Vec<(&str, &str)>) -> RetrievedEvidence {
        RetrievedEvidence {
            items: items
                .into_iter()
                .map(|(id, text)| EvidenceItem {
                    chunk_id: id.to_string(),
                    score: 0.5,
                    text: text.to_string(),
                })
                .collect(),
            query_sha256: "00".to_string(),
            truncated_query: false,
        }
    }

    fn utterance(agent: &str, round: u32, text: &str) -> Utterance {
        Utterance {
            round,
            agent_id: agent.to_string(),
            text: text.to_string(),
            prompt_snapshot: String::new(),
            weights_snapshot: WeightVector::default(),
            evidence_ids: vec![],
        }
    }

    fn state<'a>(
        window: &'a [Utterance],
        ev: &'a RetrievedEvidence,
    ) -> AgentState<'a> {
        AgentState {
            agent_id: "farmer",
            persona_task: "You are the farmer; you argue for irrigation rights.",
            query: "Should the old weir be rebuilt?",
            memory_window: window,
            evidence: ev,
        }
    }

    #[test]
    fn high_tier_instructions_appear_verbatim() {
        let ev = evidence(vec![("mill.txt#0000", "The weir holds water.")]);
        let st = state(&[], &ev);
        let action = build_action(
            &st,
            &WeightVector::new(1.5, 1.3, 2.0),
            &RuleTemplate::None,
            &BlockMask::full(),
            &PromptStyle::default(),
        )
        .unwrap();
        assert!(action.rendered_text.contains(T_HIGH));
        assert!(action.rendered_text.contains(M_HIGH));
        assert!(action.rendered_text.contains(D_HIGH));
    }

    #[test]
    fn mid_and_low_tiers_select_their_instructions() {
        let ev = evidence(vec![]);
        let st = state(&[], &ev);
        let action = build_action(
            &st,
            &WeightVector::new(1.0, 0.5, 0.0),
            &RuleTemplate::None,
            &BlockMask::full(),
            &PromptStyle::default(),
        )
        .unwrap();
        assert!(action.rendered_text.contains(T_MID));
        assert!(action.rendered_text.contains(M_LOW));
        assert!(action.rendered_text.contains(D_LOW));
    }

    #[test]
    fn light_rule_substitutes_sentence_limit() {
        let ev = evidence(vec![]);
        let st = state(&[], &ev);
        let action = build_action(
            &st,
            &WeightVector::default(),
            &RuleTemplate::Light { sentence_limit: 5 },
            &BlockMask::full(),
            &PromptStyle::default(),
        )
        .unwrap();
        assert!(action
            .rendered_text
            .contains("First directly answer [Q], then provide 1\u{2013}2 pieces of evidence from [D]; respond to [M] if necessary; limit the response to at most 5 sentences."));
        assert!(!action.rendered_text.contains("{N}"));
    }

    #[test]
    fn struct_rule_text_is_verbatim() {
        let ev = evidence(vec![]);
        let st = state(&[], &ev);
        let action = build_action(
            &st,
            &WeightVector::default(),
            &RuleTemplate::Struct,
            &BlockMask::full(),
            &PromptStyle::default(),
        )
        .unwrap();
        assert!(action.rendered_text.contains(STRUCT_RULE_TEXT));
        assert!(action.blocks.iter().any(|b| b.label == "[R]"));
    }

    #[test]
    fn none_rule_omits_rule_block() {
        let ev = evidence(vec![]);
        let st = state(&[], &ev);
        let action = build_action(
            &st,
            &WeightVector::default(),
            &RuleTemplate::None,
            &BlockMask::full(),
            &PromptStyle::default(),
        )
        .unwrap();
        assert!(!action.blocks.iter().any(|b| b.label == "[R]"));
    }

    #[test]
    fn mask_removes_blocks_entirely_while_zero_weight_keeps_them() {
        let ev = evidence(vec![("c#0000", "snippet")]);
        let st = state(&[], &ev);
        let masked = build_action(
            &st,
            &WeightVector::default(),
            &RuleTemplate::None,
            &BlockMask { t: true, m: true, d: false },
            &PromptStyle::default(),
        )
        .unwrap();
        assert!(!masked.rendered_text.contains("[D]"));

        let zero_weight = build_action(
            &st,
            &WeightVector::new(1.0, 1.0, 0.0),
            &RuleTemplate::None,
            &BlockMask::full(),
            &PromptStyle::default(),
        )
        .unwrap();
        assert!(zero_weight.rendered_text.contains("[D]"));
        assert!(zero_weight.rendered_text.contains(D_LOW));
    }

    #[test]
    fn empty_mask_leaves_only_query_and_rule() {
        let ev = evidence(vec![("c#0000", "snippet")]);
        let window = [utterance("miller", 1, "the pond matters")];
        let st = state(&window, &ev);
        let none_mask = BlockMask { t: false, m: false, d: false };
        let bare = build_action(
            &st,
            &WeightVector::default(),
            &RuleTemplate::None,
            &none_mask,
            &PromptStyle::default(),
        )
        .unwrap();
        let labels: Vec<&str> = bare.blocks.iter().map(|b| b.label.as_str()).collect();
        assert_eq!(labels, vec!["[Q]"]);

        let ruled = build_action(
            &st,
            &WeightVector::default(),
            &RuleTemplate::light(),
            &none_mask,
            &PromptStyle::default(),
        )
        .unwrap();
        let labels: Vec<&str> = ruled.blocks.iter().map(|b| b.label.as_str()).collect();
        assert_eq!(labels, vec!["[Q]", "[R]"]);
    }

    #[test]
    fn empty_window_and_evidence_have_placeholders() {
        let ev = evidence(vec![]);
        let st = state(&[], &ev);
        let action = build_action(
            &st,
            &WeightVector::default(),
            &RuleTemplate::None,
            &BlockMask::full(),
            &PromptStyle::default(),
        )
        .unwrap();
        assert!(action.rendered_text.contains(EMPTY_MEMORY_BODY));
        assert!(action.rendered_text.contains(EMPTY_EVIDENCE_BODY));
    }

    #[test]
    fn memory_and_evidence_bodies_are_line_formatted() {
        let window = vec![
            utterance("miller", 1, "The pond must stay full."),
            utterance("smith", 1, "Iron needs the forge fire, not the river."),
        ];
        let ev = evidence(vec![("mill.txt#0002", "Repairs in spring cost forty silver.")]);
        let st = state(&window, &ev);
        let action = build_action(
            &st,
            &WeightVector::default(),
            &RuleTemplate::None,
            &BlockMask::full(),
            &PromptStyle::default(),
        )
        .unwrap();
        assert!(action
            .rendered_text
            .contains("miller: The pond must stay full.\nsmith: Iron needs the forge fire, not the river."));
        assert!(action
            .rendered_text
            .contains("[mill.txt#0002] Repairs in spring cost forty silver."));
    }

    #[test]
    fn changing_one_state_element_changes_one_block() {
        let ev = evidence(vec![("c#0000", "snippet")]);
        let window = vec![utterance("miller", 1, "first turn")];
        let st_a = state(&window, &ev);
        let mut st_b = st_a;
        st_b.query = "Should the ford be bridged instead?";
        let w = WeightVector::default();
        let a = build_action(&st_a, &w, &RuleTemplate::None, &BlockMask::full(), &PromptStyle::default()).unwrap();
        let b = build_action(&st_b, &w, &RuleTemplate::None, &BlockMask::full(), &PromptStyle::default()).unwrap();
        assert_eq!(a.blocks.len(), b.blocks.len());
        let mut differing = 0;
        for (ba, bb) in a.blocks.iter().zip(&b.blocks) {
            if ba != bb {
                differing += 1;
                assert_eq!(ba.label, "[Q]");
            }
        }
        assert_eq!(differing, 1);
        assert_eq!(a.preamble, b.preamble);
    }

    #[test]
    fn weight_change_within_tier_leaves_prompt_identical() {
        let ev = evidence(vec![]);
        let st = state(&[], &ev);
        let style = PromptStyle::default();
        let a = build_action(&st, &WeightVector::new(0.9, 1.0, 1.1), &RuleTemplate::None, &BlockMask::full(), &style).unwrap();
        let b = build_action(&st, &WeightVector::new(1.0, 0.9, 1.2), &RuleTemplate::None, &BlockMask::full(), &style).unwrap();
        assert_eq!(a.rendered_text, b.rendered_text);
    }

    #[test]
    fn out_of_range_weight_propagates_error() {
        let ev = evidence(vec![]);
        let st = state(&[], &ev);
        let err = build_action(
            &st,
            &WeightVector::new(1.0, 2.4, 1.0),
            &RuleTemplate::None,
            &BlockMask::full(),
            &PromptStyle::default(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn toml_overrides_replace_only_named_entries() {
        let table = InstructionTable::with_overrides_toml(
            "[t]\nhigh = \"Custom persona line.\"\n\n[d]\nlow = \"Custom optional line.\"\n",
        )
        .unwrap();
        assert_eq!(table.instruction(Component::T, Tier::High), "Custom persona line.");
        assert_eq!(table.instruction(Component::D, Tier::Low), "Custom optional line.");
        assert_eq!(table.instruction(Component::M, Tier::Mid), M_MID);
        assert_eq!(table.instruction(Component::T, Tier::Mid), T_MID);
    }

    #[test]
    fn preamble_carries_agent_id() {
        let ev = evidence(vec![]);
        let st = state(&[], &ev);
        let action = build_action(
            &st,
            &WeightVector::default(),
            &RuleTemplate::None,
            &BlockMask::full(),
            &PromptStyle::default(),
        )
        .unwrap();
        assert!(action.preamble.contains("\"farmer\""));
        assert!(action.rendered_text.starts_with(&action.preamble));
    }

    proptest! {
        #[test]
        fn build_action_is_deterministic_and_total(
            wt in 0.0f64..=2.0,
            wm in 0.0f64..=2.0,
            wd in 0.0f64..=2.0,
            query in "[a-zA-Z ?]{1,60}",
            persona in "[a-zA-Z ,.]{1,80}",
        ) {
            let ev = evidence(vec![("k#0000", "some snippet text")]);
            let st = AgentState {
                agent_id: "a1",
                persona_task: &persona,
                query: &query,
                memory_window: &[],
                evidence: &ev,
            };
            let w = WeightVector::new(wt, wm, wd);
            let style = PromptStyle::default();
            let x = build_action(&st, &w, &RuleTemplate::light(), &BlockMask::full(), &style).unwrap();
            let y = build_action(&st, &w, &RuleTemplate::light(), &BlockMask::full(), &style).unwrap();
            prop_assert_eq!(&x.rendered_text, &y.rendered_text);
            prop_assert!(x.rendered_text.contains(&query));
            prop_assert!(x.rendered_text.contains(&persona));
        }
    }
}
