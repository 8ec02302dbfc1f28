//! Experiment harness: expands a scenario into a grid of runs, executes them
//! on a worker pool, and owns the on-disk layout of results.
//!
//! Layout under the output directory:
//!   manifests/{run_id}.json          resolved config + hashes
//!   transcripts/{run_id}.jsonl       one entry per turn
//!   transcripts/{run_id}.calls.jsonl backend call log
//!   metrics/metrics.csv              per-utterance metric rows
//!   reports/report.csv               aggregate table
//!   reports/round_series.csv         per-round means with 95% CI

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{build_embedding, build_judge, BackendBinding, ProviderKind, StubMode};
use crate::domain::{validate_scenario, Component, PolicySpec, ScenarioConfig, WeightVector};
use crate::engine::{
    derive_run_seed, parse_transcript_jsonl, render_calls_jsonl, render_transcript_jsonl,
    run_dialogue, sha256_hex, BackendSet, EngineError,
};
use crate::knowledge::{KnowledgeBase, KnowledgeError, KnowledgeIndex};
use crate::metrics::{
    build_report, evaluate_run, make_run_id, parse_metrics_csv, write_metrics_csv, EvalContext,
    EvalOptions, MetricsError, MetricsRow,
};
use crate::scenario::{LoadedScenario, ScenarioError};

pub const MANIFESTS_DIR: &str = "manifests";
pub const TRANSCRIPTS_DIR: &str = "transcripts";
pub const METRICS_DIR: &str = "metrics";
pub const REPORTS_DIR: &str = "reports";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const SERIES_FILE: &str = "round_series.csv";
pub const STATUS_FILE: &str = "index.json";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("engine: {0}")]
    Engine(#[from] EngineError),
    #[error("knowledge: {0}")]
    Knowledge(#[from] KnowledgeError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("scenario: {0}")]
    Scenario(#[from] ScenarioError),
    #[error("io ({path}): {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("json ({path}): {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("invalid scenario:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
    #[error("{0}")]
    Other(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Everything persisted about one run apart from its transcript.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub base_seed: u64,
    pub run_seed: u64,
    pub config_sha256: String,
    pub config: ScenarioConfig,
}

pub fn config_digest(config: &ScenarioConfig) -> String {
    sha256_hex(
        serde_json::to_string(config)
            .expect("scenario configs serialize")
            .as_bytes(),
    )
}

/// Options shared by the run and evaluate entry points.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Runs per grid cell; 0 is treated as 1.
    pub runs: u32,
    /// Overrides the scenario seed when set.
    pub seed: Option<u64>,
    /// Worker threads; 0 picks the rayon default.
    pub workers: usize,
    /// Expand the scenario's grid axes instead of running the base cell.
    pub grid: bool,
    /// Restrict grid rules, e.g. ["none", "light"].
    pub rules: Option<Vec<String>>,
    /// Restrict grid masks, e.g. ["TMD", "TD"].
    pub masks: Option<Vec<String>>,
    /// Force every backend binding to its stub provider.
    pub stub: bool,
    pub embed_backend: Option<String>,
    pub judge_backend: Option<String>,
}

fn sanitize_label(label: &str) -> String {
    let mut out: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '-' })
        .collect();
    if out.is_empty() {
        out.push('x');
    }
    out
}

/// Applies CLI-level backend overrides to a resolved config.
pub fn apply_backend_overrides(
    config: &mut ScenarioConfig,
    opts: &RunOptions,
) -> Result<(), HarnessError> {
    if let Some(embed) = &opts.embed_backend {
        if !config.backends.contains_key(embed) {
            return Err(HarnessError::Other(format!(
                "--embed-backend '{embed}' is not in the backend registry"
            )));
        }
        config.embed_backend = embed.clone();
    }
    if let Some(judge) = &opts.judge_backend {
        if !config.backends.contains_key(judge) {
            return Err(HarnessError::Other(format!(
                "--judge-backend '{judge}' is not in the backend registry"
            )));
        }
        config.judge_backend = Some(judge.clone());
    }
    if opts.stub {
        for binding in config.backends.values_mut() {
            binding.provider = ProviderKind::Stub;
            if binding.mode == StubMode::Script && binding.script.is_none() {
                binding.mode = StubMode::Synth;
            }
        }
    }
    Ok(())
}

/// One planned dialogue: the fully resolved config and its identity.
struct PlannedRun {
    run_id: String,
    run_seed: u64,
    config: ScenarioConfig,
}

fn plan_runs(
    base_config: &ScenarioConfig,
    scenario: &LoadedScenario,
    opts: &RunOptions,
) -> Result<Vec<PlannedRun>, HarnessError> {
    let base_seed = opts.seed.unwrap_or(base_config.seed);
    let runs = opts.runs.max(1);
    let scenario_label = sanitize_label(&base_config.name);

    let mut plans = Vec::new();
    if !opts.grid {
        let rule_names: Vec<&str> = base_config
            .agents
            .iter()
            .map(|a| a.policy.rule.name())
            .collect();
        let rule_label = if rule_names.windows(2).all(|w| w[0] == w[1]) {
            rule_names.first().copied().unwrap_or("none").to_string()
        } else {
            "mixed".to_string()
        };
        for run_idx in 0..runs {
            let mut config = base_config.clone();
            config.seed = base_seed;
            let run_id = make_run_id(&scenario_label, "Q1", &rule_label, "base", run_idx);
            plans.push(PlannedRun {
                run_seed: derive_run_seed(base_seed, &run_id),
                run_id,
                config,
            });
        }
        return Ok(plans);
    }

    let grid = &scenario.grid;
    let rules: Vec<_> = match &opts.rules {
        Some(filter) => {
            let mut selected = Vec::new();
            for name in filter {
                selected.push(crate::scenario::parse_rule(name, None)?);
            }
            selected
        }
        None => grid.rules.clone(),
    };
    let masks: Vec<(String, crate::domain::BlockMask)> = match &opts.masks {
        Some(filter) => {
            let mut selected = Vec::new();
            for tag in filter {
                selected.push((tag.to_uppercase(), crate::scenario::parse_mask(tag)?));
            }
            selected
        }
        None => grid.masks.clone(),
    };

    for (query_id, query_text) in &scenario.queries {
        for rule in &rules {
            for variant in &grid.variants {
                for (mask_tag, mask) in &masks {
                    let variant_label = if mask_tag == "TMD" {
                        sanitize_label(&variant.name)
                    } else {
                        sanitize_label(&format!("{}-m{}", variant.name, mask_tag))
                    };
                    for run_idx in 0..runs {
                        let mut config = base_config.clone();
                        config.seed = base_seed;
                        config.query = query_text.clone();
                        for agent in &mut config.agents {
                            agent.policy.rule = *rule;
                            agent.policy.weights = variant.weights;
                            agent.policy.mask = *mask;
                            if let Some(adaptive) = variant.adaptive {
                                agent.policy.adaptive = adaptive;
                            }
                        }
                        let run_id = make_run_id(
                            &scenario_label,
                            query_id,
                            rule.name(),
                            &variant_label,
                            run_idx,
                        );
                        plans.push(PlannedRun {
                            run_seed: derive_run_seed(base_seed, &run_id),
                            run_id,
                            config,
                        });
                    }
                }
            }
        }
    }
    Ok(plans)
}

/// Chunks and embeds every corpus of the scenario once, using the embedding
/// backend the (possibly overridden) config names.
pub fn ingest_scenario(
    scenario: &LoadedScenario,
    config: &ScenarioConfig,
) -> Result<(KnowledgeIndex, Vec<String>), HarnessError> {
    let binding = config.backends.get(&config.embed_backend).ok_or_else(|| {
        HarnessError::Other(format!(
            "embed backend '{}' is not in the backend registry",
            config.embed_backend
        ))
    })?;
    let embedder = build_embedding(binding).map_err(EngineError::Backend)?;
    let mut bases = BTreeMap::new();
    let mut warnings = Vec::new();
    for (reference, docs) in &scenario.corpora {
        let (base, mut warns) =
            KnowledgeBase::ingest(docs, embedder.as_ref(), scenario.chunk_chars)?;
        warnings.append(&mut warns);
        bases.insert(reference.clone(), base);
    }
    Ok((KnowledgeIndex::new(bases), warnings))
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool, HarnessError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| HarnessError::Other(format!("worker pool: {e}")))
}

/// Status of one grid cell, recorded in manifests/index.json.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellStatus {
    pub run_id: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct RunReport {
    pub run_ids: Vec<String>,
    pub failures: Vec<CellStatus>,
    pub ingest_warnings: Vec<String>,
}

/// Runs a scenario (optionally its whole grid) and writes manifests,
/// transcripts and call logs under `opts.out_dir`.
pub fn run_command(scenario: &LoadedScenario, opts: &RunOptions) -> Result<RunReport, HarnessError> {
    let mut base_config = scenario.config.clone();
    apply_backend_overrides(&mut base_config, opts)?;
    let violations = validate_scenario(&base_config);
    if !violations.is_empty() {
        return Err(HarnessError::Invalid(violations));
    }

    let (index, ingest_warnings) = ingest_scenario(scenario, &base_config)?;
    let backends = BackendSet::build(&base_config, &scenario.base_dir)?;
    let plans = plan_runs(&base_config, scenario, opts)?;

    let manifests_dir = opts.out_dir.join(MANIFESTS_DIR);
    let transcripts_dir = opts.out_dir.join(TRANSCRIPTS_DIR);
    std::fs::create_dir_all(&manifests_dir).map_err(io_err(&manifests_dir))?;
    std::fs::create_dir_all(&transcripts_dir).map_err(io_err(&transcripts_dir))?;

    let base_seed = opts.seed.unwrap_or(base_config.seed);
    let pool = thread_pool(opts.workers)?;
    let statuses: Vec<CellStatus> = pool.install(|| {
        plans
            .par_iter()
            .map(|plan| {
                let result = execute_plan(plan, scenario, &index, &backends, base_seed,
                    &manifests_dir, &transcripts_dir);
                CellStatus {
                    run_id: plan.run_id.clone(),
                    ok: result.is_ok(),
                    error: result.err().map(|e| e.to_string()),
                }
            })
            .collect()
    });

    let status_path = manifests_dir.join(STATUS_FILE);
    let status_json = serde_json::to_string_pretty(&statuses).map_err(|e| HarnessError::Json {
        path: status_path.clone(),
        source: e,
    })?;
    std::fs::write(&status_path, status_json + "\n").map_err(io_err(&status_path))?;

    let (done, failures): (Vec<CellStatus>, Vec<CellStatus>) =
        statuses.into_iter().partition(|s| s.ok);
    Ok(RunReport {
        run_ids: done.into_iter().map(|s| s.run_id).collect(),
        failures,
        ingest_warnings,
    })
}

fn execute_plan(
    plan: &PlannedRun,
    scenario: &LoadedScenario,
    index: &KnowledgeIndex,
    backends: &BackendSet,
    base_seed: u64,
    manifests_dir: &Path,
    transcripts_dir: &Path,
) -> Result<(), HarnessError> {
    let output = run_dialogue(
        &plan.config,
        index,
        backends,
        &scenario.style,
        &plan.run_id,
        plan.run_seed,
    )?;
    let manifest = RunManifest {
        run_id: plan.run_id.clone(),
        base_seed,
        run_seed: plan.run_seed,
        config_sha256: config_digest(&plan.config),
        config: plan.config.clone(),
    };
    let manifest_path = manifests_dir.join(format!("{}.json", plan.run_id));
    let manifest_json =
        serde_json::to_string_pretty(&manifest).map_err(|e| HarnessError::Json {
            path: manifest_path.clone(),
            source: e,
        })?;
    std::fs::write(&manifest_path, manifest_json + "\n").map_err(io_err(&manifest_path))?;

    let transcript_path = transcripts_dir.join(format!("{}.jsonl", plan.run_id));
    std::fs::write(&transcript_path, render_transcript_jsonl(&output.entries))
        .map_err(io_err(&transcript_path))?;
    let calls_path = transcripts_dir.join(format!("{}.calls.jsonl", plan.run_id));
    std::fs::write(&calls_path, render_calls_jsonl(&output.calls)).map_err(io_err(&calls_path))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, HarnessError> {
    let raw = std::fs::read_to_string(path).map_err(io_err(path))?;
    let manifest: RunManifest = serde_json::from_str(&raw).map_err(|e| HarnessError::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    let recomputed = config_digest(&manifest.config);
    if recomputed != manifest.config_sha256 {
        return Err(HarnessError::Other(format!(
            "manifest {} config hash mismatch: recorded {}, recomputed {}",
            path.display(),
            manifest.config_sha256,
            recomputed
        )));
    }
    Ok(manifest)
}

fn transcript_run_ids(out_dir: &Path) -> Result<Vec<String>, HarnessError> {
    let dir = out_dir.join(TRANSCRIPTS_DIR);
    let mut ids: Vec<String> = std::fs::read_dir(&dir)
        .map_err(io_err(&dir))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().to_string();
            name.strip_suffix(".jsonl")
                .filter(|stem| !stem.ends_with(".calls"))
                .map(str::to_string)
        })
        .collect();
    ids.sort();
    Ok(ids)
}

/// Scores every transcript under `out_dir` and writes metrics/metrics.csv.
/// Backends come from each run's manifest, after CLI overrides.
pub fn evaluate_command(opts: &RunOptions) -> Result<usize, HarnessError> {
    let run_ids = transcript_run_ids(&opts.out_dir)?;
    if run_ids.is_empty() {
        return Err(HarnessError::Other(format!(
            "no transcripts found under {}",
            opts.out_dir.join(TRANSCRIPTS_DIR).display()
        )));
    }

    let pool = thread_pool(opts.workers)?;
    let row_groups: Vec<Vec<MetricsRow>> = pool.install(|| {
        run_ids
            .par_iter()
            .map(|run_id| -> Result<Vec<MetricsRow>, HarnessError> {
                let manifest_path = opts
                    .out_dir
                    .join(MANIFESTS_DIR)
                    .join(format!("{run_id}.json"));
                let manifest = read_manifest(&manifest_path)?;
                let mut config = manifest.config;
                apply_backend_overrides(&mut config, opts)?;

                let transcript_path = opts
                    .out_dir
                    .join(TRANSCRIPTS_DIR)
                    .join(format!("{run_id}.jsonl"));
                let raw = std::fs::read_to_string(&transcript_path)
                    .map_err(io_err(&transcript_path))?;
                let entries = parse_transcript_jsonl(&raw).map_err(|e| HarnessError::Json {
                    path: transcript_path.clone(),
                    source: e,
                })?;

                let embed_binding: &BackendBinding =
                    config.backends.get(&config.embed_backend).ok_or_else(|| {
                        HarnessError::Other(format!(
                            "run {run_id}: embed backend '{}' missing from manifest",
                            config.embed_backend
                        ))
                    })?;
                let embed = build_embedding(embed_binding).map_err(EngineError::Backend)?;
                let judge = match &config.judge_backend {
                    Some(id) => {
                        let binding = config.backends.get(id).ok_or_else(|| {
                            HarnessError::Other(format!(
                                "run {run_id}: judge backend '{id}' missing from manifest"
                            ))
                        })?;
                        Some(build_judge(binding).map_err(EngineError::Backend)?)
                    }
                    None => None,
                };

                let ctx = EvalContext::from_config(&config);
                let rows = evaluate_run(
                    &entries,
                    &ctx,
                    embed.as_ref(),
                    judge.as_deref(),
                    &EvalOptions::default(),
                )?;
                Ok(rows)
            })
            .collect::<Result<Vec<_>, _>>()
    })?;

    let rows: Vec<MetricsRow> = row_groups.into_iter().flatten().collect();
    let metrics_dir = opts.out_dir.join(METRICS_DIR);
    std::fs::create_dir_all(&metrics_dir).map_err(io_err(&metrics_dir))?;
    let path = metrics_dir.join(METRICS_FILE);
    std::fs::write(&path, write_metrics_csv(&rows)?).map_err(io_err(&path))?;
    Ok(rows.len())
}

/// Builds reports/report.csv, reports/report.json and
/// reports/round_series.csv from metrics/metrics.csv. Pure transformation
/// of the metrics file.
pub fn report_command(out_dir: &Path) -> Result<(PathBuf, PathBuf), HarnessError> {
    let metrics_path = out_dir.join(METRICS_DIR).join(METRICS_FILE);
    let raw = std::fs::read_to_string(&metrics_path).map_err(io_err(&metrics_path))?;
    let rows = parse_metrics_csv(&raw)?;
    let output = build_report(&rows)?;

    let reports_dir = out_dir.join(REPORTS_DIR);
    std::fs::create_dir_all(&reports_dir).map_err(io_err(&reports_dir))?;
    let report_path = reports_dir.join(REPORT_FILE);
    std::fs::write(&report_path, &output.report_csv).map_err(io_err(&report_path))?;
    let json_path = reports_dir.join(REPORT_JSON_FILE);
    std::fs::write(&json_path, &output.report_json).map_err(io_err(&json_path))?;
    let series_path = reports_dir.join(SERIES_FILE);
    std::fs::write(&series_path, &output.series_csv).map_err(io_err(&series_path))?;
    Ok((report_path, series_path))
}

/// One policy per value: the named component set to the value, the other two
/// kept from `base`. Values outside [0,2] are rejected.
pub fn weight_grid(
    base: &PolicySpec,
    axis: Component,
    values: &[f64],
) -> Result<Vec<PolicySpec>, HarnessError> {
    let (lo, hi) = WeightVector::RANGE;
    let mut out = Vec::with_capacity(values.len());
    for &v in values {
        if !(lo..=hi).contains(&v) || v.is_nan() {
            return Err(HarnessError::Other(format!(
                "w_{} = {v} outside [{lo},{hi}]",
                axis.label()
            )));
        }
        let mut spec = base.clone();
        spec.weights = spec.weights.with(axis, v);
        out.push(spec);
    }
    Ok(out)
}

#[derive(Debug)]
pub struct IngestStats {
    pub bases: Vec<(String, usize)>,
    pub warnings: Vec<String>,
}

/// Chunks and embeds all corpora, reporting sizes without running anything.
pub fn ingest_command(
    scenario: &LoadedScenario,
    opts: &RunOptions,
) -> Result<IngestStats, HarnessError> {
    let mut config = scenario.config.clone();
    apply_backend_overrides(&mut config, opts)?;
    let (index, warnings) = ingest_scenario(scenario, &config)?;
    let bases = index
        .refs()
        .map(|r| {
            let len = index.base(r).map(|b| b.len()).unwrap_or(0);
            (r.clone(), len)
        })
        .collect();
    Ok(IngestStats { bases, warnings })
}
