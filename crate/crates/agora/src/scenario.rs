//! Scenario files: a TOML format describing the discussion setup, agent
//! roster, knowledge corpora, backend registry, and an optional experiment
//! grid. Loading resolves defaults and reads corpus files; semantic
//! validation stays in `domain::validate_scenario` so the validate command
//! can report all violations of a loadable file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::backends::BackendBinding;
use crate::domain::{
    AgentSpec, BlockMask, FeedbackMode, PolicySpec, RuleTemplate, ScenarioConfig, WeightVector,
};
use crate::knowledge::DEFAULT_CHUNK_CHARS;
use crate::policy::{InstructionTable, PromptStyle};
use crate::scheduler::AdaptiveConfig;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("io ({path}): {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ScenarioError + '_ {
    move |source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: Option<String>,
    query: Option<String>,
    queries: Option<Vec<String>>,
    rounds: u32,
    retrieval_n: usize,
    memory_window: Option<usize>,
    seed: u64,
    sequential: Option<bool>,
    feedback_mode: Option<FeedbackMode>,
    embed_backend: String,
    judge_backend: Option<String>,
    chunk_chars: Option<usize>,
    preamble: Option<String>,
    instructions_file: Option<PathBuf>,
    policy: Option<PolicyFile>,
    agents: Vec<AgentFile>,
    #[serde(default)]
    knowledge: BTreeMap<String, KnowledgeFile>,
    backends: BTreeMap<String, BackendBinding>,
    grid: Option<GridFile>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    rule: Option<String>,
    sentence_limit: Option<u32>,
    #[serde(rename = "w_T")]
    w_t: Option<f64>,
    #[serde(rename = "w_M")]
    w_m: Option<f64>,
    #[serde(rename = "w_D")]
    w_d: Option<f64>,
    adaptive: Option<AdaptiveConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentFile {
    id: String,
    persona_task: String,
    knowledge_ref: String,
    backend_ref: String,
    policy: Option<PolicyFile>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct KnowledgeFile {
    dir: Option<PathBuf>,
    files: Option<Vec<PathBuf>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    rules: Option<Vec<String>>,
    masks: Option<Vec<String>>,
    weights: Option<Vec<WeightVariantFile>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightVariantFile {
    name: String,
    #[serde(rename = "w_T")]
    w_t: Option<f64>,
    #[serde(rename = "w_M")]
    w_m: Option<f64>,
    #[serde(rename = "w_D")]
    w_d: Option<f64>,
    adaptive: Option<AdaptiveConfig>,
}

/// One weight setting of the experiment grid.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVariant {
    pub name: String,
    pub weights: WeightVector,
    /// None keeps each agent's own adaptive settings.
    pub adaptive: Option<AdaptiveConfig>,
}

/// The resolved grid axes. A scenario without a [grid] table gets a single
/// cell matching its base policy.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub rules: Vec<RuleTemplate>,
    pub masks: Vec<(String, BlockMask)>,
    pub variants: Vec<WeightVariant>,
}

#[derive(Debug)]
pub struct LoadedScenario {
    pub config: ScenarioConfig,
    /// (query_id, text) pairs, Q1-based, first one mirrored in config.query.
    pub queries: Vec<(String, String)>,
    /// knowledge_ref -> (doc_id, text) pairs.
    pub corpora: BTreeMap<String, Vec<(String, String)>>,
    pub chunk_chars: usize,
    pub grid: GridSpec,
    pub style: PromptStyle,
    pub base_dir: PathBuf,
}

pub fn parse_rule(name: &str, sentence_limit: Option<u32>) -> Result<RuleTemplate, ScenarioError> {
    match name {
        "none" => Ok(RuleTemplate::None),
        "light" => Ok(RuleTemplate::Light {
            sentence_limit: sentence_limit.unwrap_or(RuleTemplate::DEFAULT_SENTENCE_LIMIT),
        }),
        "struct" => Ok(RuleTemplate::Struct),
        other => Err(ScenarioError::Invalid(format!(
            "unknown rule '{other}' (expected none, light or struct)"
        ))),
    }
}

/// Parses a mask tag like "TMD", "TD" or "-" (no blocks).
pub fn parse_mask(tag: &str) -> Result<BlockMask, ScenarioError> {
    if tag == "-" {
        return Ok(BlockMask { t: false, m: false, d: false });
    }
    let mut mask = BlockMask { t: false, m: false, d: false };
    for c in tag.chars() {
        match c.to_ascii_uppercase() {
            'T' => mask.t = true,
            'M' => mask.m = true,
            'D' => mask.d = true,
            other => {
                return Err(ScenarioError::Invalid(format!(
                    "mask '{tag}' contains unknown block '{other}'"
                )))
            }
        }
    }
    Ok(mask)
}

fn resolve_policy(
    base: Option<&PolicyFile>,
    file: Option<&PolicyFile>,
) -> Result<PolicySpec, ScenarioError> {
    // Agent-level fields win over scenario-level, which win over defaults.
    let field = |get: &dyn Fn(&PolicyFile) -> Option<f64>| -> Option<f64> {
        file.and_then(|p| get(p)).or_else(|| base.and_then(|p| get(p)))
    };
    let rule_name = file
        .and_then(|p| p.rule.clone())
        .or_else(|| base.and_then(|p| p.rule.clone()));
    let sentence_limit = file
        .and_then(|p| p.sentence_limit)
        .or_else(|| base.and_then(|p| p.sentence_limit));
    let rule = match rule_name {
        Some(name) => parse_rule(&name, sentence_limit)?,
        None => RuleTemplate::None,
    };
    let weights = WeightVector::new(
        field(&|p| p.w_t).unwrap_or(1.0),
        field(&|p| p.w_m).unwrap_or(1.0),
        field(&|p| p.w_d).unwrap_or(1.0),
    );
    let adaptive = file
        .and_then(|p| p.adaptive)
        .or_else(|| base.and_then(|p| p.adaptive))
        .unwrap_or_default();
    Ok(PolicySpec {
        rule,
        weights,
        adaptive,
        mask: BlockMask::full(),
    })
}

fn load_corpus(
    reference: &str,
    spec: &KnowledgeFile,
    base_dir: &Path,
) -> Result<Vec<(String, String)>, ScenarioError> {
    let mut docs: Vec<(String, String)> = Vec::new();
    match (&spec.dir, &spec.files) {
        (Some(dir), None) => {
            let full = if dir.is_absolute() { dir.clone() } else { base_dir.join(dir) };
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&full)
                .map_err(io_err(&full))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .and_then(|e| e.to_str())
                        .map_or(false, |e| e == "txt" || e == "md")
                })
                .collect();
            paths.sort();
            for path in paths {
                let doc_id = path
                    .file_name()
                    .and_then(|n| n.to_str())
                    .unwrap_or("doc")
                    .to_string();
                let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
                docs.push((doc_id, text));
            }
        }
        (None, Some(files)) => {
            for rel in files {
                let path = if rel.is_absolute() { rel.clone() } else { base_dir.join(rel) };
                let doc_id = path
                    .file_name()
                    .and_then(|n| n.to_str())
                    .unwrap_or("doc")
                    .to_string();
                let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
                docs.push((doc_id, text));
            }
        }
        _ => {
            return Err(ScenarioError::Invalid(format!(
                "knowledge.{reference} must set exactly one of 'dir' or 'files'"
            )))
        }
    }
    Ok(docs)
}

pub fn load_scenario(path: &Path) -> Result<LoadedScenario, ScenarioError> {
    let raw = std::fs::read_to_string(path).map_err(io_err(path))?;
    let file: ScenarioFile = toml::from_str(&raw)?;
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    let name = file.name.clone().unwrap_or_else(|| {
        path.file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("scenario")
            .to_string()
    });

    let query_texts: Vec<String> = match (&file.query, &file.queries) {
        (Some(q), None) => vec![q.clone()],
        (None, Some(qs)) if !qs.is_empty() => qs.clone(),
        (Some(q), Some(qs)) => {
            let mut all = vec![q.clone()];
            all.extend(qs.iter().cloned());
            all
        }
        _ => {
            return Err(ScenarioError::Invalid(
                "scenario needs 'query' or a non-empty 'queries' list".to_string(),
            ))
        }
    };
    let queries: Vec<(String, String)> = query_texts
        .iter()
        .enumerate()
        .map(|(i, q)| (format!("Q{}", i + 1), q.clone()))
        .collect();

    let mut agents = Vec::with_capacity(file.agents.len());
    for a in &file.agents {
        agents.push(AgentSpec {
            id: a.id.clone(),
            persona_task: a.persona_task.clone(),
            knowledge_ref: a.knowledge_ref.clone(),
            backend_ref: a.backend_ref.clone(),
            policy: resolve_policy(file.policy.as_ref(), a.policy.as_ref())?,
        });
    }

    let memory_window = file
        .memory_window
        .unwrap_or_else(|| ScenarioConfig::default_memory_window(agents.len()));

    let config = ScenarioConfig {
        name: name.clone(),
        query: query_texts[0].clone(),
        rounds: file.rounds,
        retrieval_n: file.retrieval_n,
        memory_window,
        seed: file.seed,
        agents,
        sequential: file.sequential.unwrap_or(false),
        feedback_mode: file.feedback_mode.unwrap_or_default(),
        embed_backend: file.embed_backend.clone(),
        judge_backend: file.judge_backend.clone(),
        backends: file.backends,
    };

    let mut corpora = BTreeMap::new();
    for (reference, spec) in &file.knowledge {
        corpora.insert(reference.clone(), load_corpus(reference, spec, &base_dir)?);
    }
    for agent in &config.agents {
        if !corpora.contains_key(&agent.knowledge_ref) {
            return Err(ScenarioError::Invalid(format!(
                "agent '{}' references knowledge.{} which is not defined",
                agent.id, agent.knowledge_ref
            )));
        }
    }

    let base_policy = resolve_policy(file.policy.as_ref(), None)?;
    let grid = resolve_grid(file.grid.as_ref(), &base_policy)?;

    let mut style = PromptStyle::default();
    if let Some(preamble) = &file.preamble {
        style.preamble_template = preamble.clone();
    }
    if let Some(instr_path) = &file.instructions_file {
        let full = if instr_path.is_absolute() {
            instr_path.clone()
        } else {
            base_dir.join(instr_path)
        };
        let src = std::fs::read_to_string(&full).map_err(io_err(&full))?;
        style.instructions = InstructionTable::with_overrides_toml(&src)?;
    }

    Ok(LoadedScenario {
        config,
        queries,
        corpora,
        chunk_chars: file.chunk_chars.unwrap_or(DEFAULT_CHUNK_CHARS),
        grid,
        style,
        base_dir,
    })
}

fn resolve_grid(
    file: Option<&GridFile>,
    base_policy: &PolicySpec,
) -> Result<GridSpec, ScenarioError> {
    let single = GridSpec {
        rules: vec![base_policy.rule],
        masks: vec![("TMD".to_string(), BlockMask::full())],
        variants: vec![WeightVariant {
            name: "base".to_string(),
            weights: base_policy.weights,
            adaptive: None,
        }],
    };
    let Some(grid) = file else {
        return Ok(single);
    };
    let rules = match &grid.rules {
        Some(names) if !names.is_empty() => names
            .iter()
            .map(|n| parse_rule(n, None))
            .collect::<Result<Vec<_>, _>>()?,
        _ => single.rules.clone(),
    };
    let masks = match &grid.masks {
        Some(tags) if !tags.is_empty() => tags
            .iter()
            .map(|t| parse_mask(t).map(|m| (t.to_uppercase(), m)))
            .collect::<Result<Vec<_>, _>>()?,
        _ => single.masks.clone(),
    };
    let variants = match &grid.weights {
        Some(list) if !list.is_empty() => list
            .iter()
            .map(|v| WeightVariant {
                name: v.name.clone(),
                weights: WeightVector::new(
                    v.w_t.unwrap_or(base_policy.weights.t),
                    v.w_m.unwrap_or(base_policy.weights.m),
                    v.w_d.unwrap_or(base_policy.weights.d),
                ),
                adaptive: v.adaptive,
            })
            .collect(),
        _ => single.variants.clone(),
    };
    Ok(GridSpec { rules, masks, variants })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::validate_scenario;

    fn write_fixture(dir: &Path) -> PathBuf {
        std::fs::create_dir_all(dir.join("corpora/farm")).unwrap();
        std::fs::create_dir_all(dir.join("corpora/mill")).unwrap();
        std::fs::write(
            dir.join("corpora/farm/fields.txt"),
            "Irrigation ditches feed the barley fields. Summer water rights matter most.",
        )
        .unwrap();
        std::fs::write(
            dir.join("corpora/mill/pond.txt"),
            "The mill pond depends on the weir. Repairs cost forty silver each spring.",
        )
        .unwrap();
        let scenario = r#"
name = "weir"
query = "Should the old weir be rebuilt?"
queries = ["Who pays for the spring repairs?"]
rounds = 6
retrieval_n = 2
seed = 42
embed_backend = "embed"
judge_backend = "judge"

[policy]
rule = "light"
sentence_limit = 4
w_T = 1.0
w_M = 0.9
w_D = 1.3

[policy.adaptive]
enabled = true
alpha = 0.2
trend = true

[[agents]]
id = "farmer"
persona_task = "You are the farmer."
knowledge_ref = "farm"
backend_ref = "chat"

[[agents]]
id = "miller"
persona_task = "You are the miller."
knowledge_ref = "mill"
backend_ref = "chat"

[agents.policy]
rule = "struct"

[knowledge.farm]
dir = "corpora/farm"

[knowledge.mill]
dir = "corpora/mill"

[backends.chat]
kind = "chat"
provider = "stub"
seed_salt = 5

[backends.embed]
kind = "embedding"
provider = "stub"
dim = 64

[backends.judge]
kind = "judge"
provider = "stub"

[grid]
rules = ["none", "light"]
masks = ["TMD", "TD"]

[[grid.weights]]
name = "evidence-heavy"
w_D = 2.0

[[grid.weights]]
name = "memory-heavy"
w_M = 2.0
"#;
        let path = dir.join("weir.toml");
        std::fs::write(&path, scenario).unwrap();
        path
    }

    #[test]
    fn loads_full_scenario_with_defaults_and_overrides() {
        let tmp = tempfile::tempdir().unwrap();
        let path = write_fixture(tmp.path());
        let loaded = load_scenario(&path).unwrap();

        assert_eq!(loaded.config.name, "weir");
        assert_eq!(loaded.queries.len(), 2);
        assert_eq!(loaded.queries[0].0, "Q1");
        assert_eq!(loaded.config.query, "Should the old weir be rebuilt?");
        // Default window: two full rounds of two agents.
        assert_eq!(loaded.config.memory_window, 4);

        let farmer = &loaded.config.agents[0];
        assert_eq!(farmer.policy.rule.name(), "light");
        assert_eq!(farmer.policy.weights, WeightVector::new(1.0, 0.9, 1.3));
        assert!(farmer.policy.adaptive.enabled);
        // The miller overrides the rule but inherits weights and adaptive.
        let miller = &loaded.config.agents[1];
        assert_eq!(miller.policy.rule.name(), "struct");
        assert_eq!(miller.policy.weights, WeightVector::new(1.0, 0.9, 1.3));
        assert!(miller.policy.adaptive.enabled);

        assert_eq!(loaded.corpora["farm"].len(), 1);
        assert_eq!(loaded.corpora["farm"][0].0, "fields.txt");

        assert_eq!(loaded.grid.rules.len(), 2);
        assert_eq!(loaded.grid.masks.len(), 2);
        assert_eq!(loaded.grid.variants.len(), 2);
        assert_eq!(loaded.grid.variants[0].name, "evidence-heavy");
        assert_eq!(
            loaded.grid.variants[0].weights,
            WeightVector::new(1.0, 0.9, 2.0)
        );

        assert!(validate_scenario(&loaded.config).is_empty());
    }

    #[test]
    fn scenario_without_query_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("bad.toml");
        std::fs::write(
            &path,
            "rounds = 3\nretrieval_n = 1\nseed = 1\nembed_backend = \"e\"\nagents = []\n[backends.e]\nkind = \"embedding\"\nprovider = \"stub\"\n",
        )
        .unwrap();
        let err = load_scenario(&path).unwrap_err();
        assert!(err.to_string().contains("query"));
    }

    #[test]
    fn unknown_rule_is_rejected() {
        assert!(parse_rule("fancy", None).is_err());
        assert_eq!(parse_rule("light", None).unwrap(), RuleTemplate::light());
    }

    #[test]
    fn mask_parsing() {
        assert_eq!(parse_mask("TMD").unwrap(), BlockMask::full());
        let td = parse_mask("TD").unwrap();
        assert!(td.t && !td.m && td.d);
        let none = parse_mask("-").unwrap();
        assert!(!none.t && !none.m && !none.d);
        assert!(parse_mask("TX").is_err());
        assert_eq!(parse_mask("tmd").unwrap(), BlockMask::full());
    }

    #[test]
    fn missing_knowledge_ref_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("bad.toml");
        std::fs::write(
            &path,
            r#"
query = "q?"
rounds = 3
retrieval_n = 1
seed = 1
embed_backend = "embed"

[[agents]]
id = "a"
persona_task = "p"
knowledge_ref = "missing"
backend_ref = "chat"

[backends.chat]
kind = "chat"
provider = "stub"

[backends.embed]
kind = "embedding"
provider = "stub"
"#,
        )
        .unwrap();
        let err = load_scenario(&path).unwrap_err();
        assert!(err.to_string().contains("knowledge.missing"));
    }

    #[test]
    fn default_grid_is_single_cell() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(tmp.path().join("c")).unwrap();
        std::fs::write(tmp.path().join("c/doc.txt"), "Some text here.").unwrap();
        let path = tmp.path().join("s.toml");
        std::fs::write(
            &path,
            r#"
query = "q?"
rounds = 2
retrieval_n = 1
seed = 1
embed_backend = "embed"

[[agents]]
id = "a"
persona_task = "p"
knowledge_ref = "c"
backend_ref = "chat"

[[agents]]
id = "b"
persona_task = "p"
knowledge_ref = "c"
backend_ref = "chat"

[knowledge.c]
dir = "c"

[backends.chat]
kind = "chat"
provider = "stub"

[backends.embed]
kind = "embedding"
provider = "stub"
"#,
        )
        .unwrap();
        let loaded = load_scenario(&path).unwrap();
        assert_eq!(loaded.grid.rules, vec![RuleTemplate::None]);
        assert_eq!(loaded.grid.variants.len(), 1);
        assert_eq!(loaded.grid.variants[0].name, "base");
        assert_eq!(loaded.chunk_chars, DEFAULT_CHUNK_CHARS);
    }
}
