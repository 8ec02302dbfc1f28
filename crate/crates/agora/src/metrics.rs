//! The five per-utterance metrics, their aggregation, and the CSV formats.
//!
//! Responsiveness and rebuttal are binary judge labels, undefined in round 1.
//! Non-repetition compares a turn against the same agent's previous turn.
//! Evidence usage fires on a long-enough run of shared content tokens with a
//! retrieved snippet. Stance alignment is the raw cosine between the turn
//! and the agent's persona/task text.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::Serialize;
use thiserror::Error;

use crate::backends::{BackendError, EmbeddingBackend, JudgeBackend, JudgeRequest, JudgeTask};
use crate::domain::ScenarioConfig;
use crate::engine::{previous_counterpart, TranscriptEntry};
use crate::knowledge::cosine_f32;

/// Minimum run of shared content tokens that counts as using evidence.
pub const DEFAULT_EVIDENCE_NGRAM: usize = 6;

/// Similarity floor applied when a turn opens with the same five tokens as
/// the agent's previous turn.
pub const OPENING_PENALTY_SIM: f64 = 0.6;
const OPENING_TOKENS: usize = 5;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Parse(String),
}

/// Sorted for binary search; a test guards the ordering.
const STOPWORDS: [&str; 112] = [
    "a", "about", "above", "after", "again", "all", "am", "an", "and", "any", "are", "as", "at",
    "be", "because", "been", "before", "being", "below", "between", "both", "but", "by", "can",
    "did", "do", "does", "doing", "down", "during", "each", "few", "for", "from", "further",
    "had", "has", "have", "having", "he", "her", "here", "hers", "him", "his", "how", "i", "if",
    "in", "into", "is", "it", "its", "just", "me", "more", "most", "my", "no", "nor", "not",
    "now", "of", "off", "on", "once", "only", "or", "other", "our", "out", "over", "own", "same",
    "she", "should", "so", "some", "such", "than", "that", "the", "their", "them", "then",
    "there", "these", "they", "this", "those", "through", "to", "too", "under", "until", "up",
    "very", "was", "we", "were", "what", "when", "where", "which", "while", "who", "whom", "why",
    "will", "with", "you", "your",
];

fn is_stopword(token: &str) -> bool {
    STOPWORDS.binary_search(&token).is_ok()
}

/// Lowercased alphanumeric runs; punctuation splits and is dropped.
pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Tokens with stopwords removed.
pub fn content_tokens(text: &str) -> Vec<String> {
    tokens(text)
        .into_iter()
        .filter(|t| !is_stopword(t))
        .collect()
}

/// Fraction of `curr` token occurrences (with multiplicity) that appear in
/// the token set of `prev`. 0 when `curr` has no tokens.
pub fn token_overlap(curr: &str, prev: &str) -> f64 {
    let curr_tokens = tokens(curr);
    if curr_tokens.is_empty() {
        return 0.0;
    }
    let prev_set: HashSet<String> = tokens(prev).into_iter().collect();
    let matched = curr_tokens.iter().filter(|t| prev_set.contains(*t)).count();
    matched as f64 / curr_tokens.len() as f64
}

/// Both texts have at least five tokens and share the first five exactly.
pub fn opening_matches(curr: &str, prev: &str) -> bool {
    let a = tokens(curr);
    let b = tokens(prev);
    a.len() >= OPENING_TOKENS && b.len() >= OPENING_TOKENS && a[..OPENING_TOKENS] == b[..OPENING_TOKENS]
}

/// Non-repetition of `curr` against the same agent's previous turn:
/// 1 - max(token overlap, cosine clamped to [0,1]), with the similarity
/// floored at 0.6 when both turns open with the same five tokens. The
/// cosine between the two turns' embeddings is supplied by the caller.
pub fn non_repetition(curr: &str, prev_own: &str, cosine: f64) -> f64 {
    let mut sim = token_overlap(curr, prev_own).max(cosine.clamp(0.0, 1.0));
    if opening_matches(curr, prev_own) {
        sim = sim.max(OPENING_PENALTY_SIM);
    }
    1.0 - sim
}

fn gram_key(window: &[String]) -> String {
    window.join("\u{1f}")
}

/// True when `a` and `b` share a run of at least `n` consecutive content
/// tokens (stopwords removed before comparing).
pub fn shared_content_run_at_least(a: &str, b: &str, n: usize) -> bool {
    shared_run(&content_tokens(a), &content_tokens(b), n)
}

/// Same, over raw tokens including stopwords. Used by the lexical
/// responsiveness fallback, where quoting filler words still signals quoting.
pub fn shared_raw_run_at_least(a: &str, b: &str, n: usize) -> bool {
    shared_run(&tokens(a), &tokens(b), n)
}

fn shared_run(a: &[String], b: &[String], n: usize) -> bool {
    assert!(n >= 1, "run length must be ≥ 1");
    if a.len() < n || b.len() < n {
        return false;
    }
    let grams: HashSet<String> = b.windows(n).map(gram_key).collect();
    a.windows(n).any(|w| grams.contains(&gram_key(w)))
}

/// 1 when the output shares a run of `ngram` consecutive content tokens with
/// any retrieved snippet, else 0.
pub fn evidence_usage(output: &str, evidence_texts: &[String], ngram: usize) -> u8 {
    let out_tokens = content_tokens(output);
    for ev in evidence_texts {
        if shared_run(&out_tokens, &content_tokens(ev), ngram) {
            return 1;
        }
    }
    0
}

/// One metrics CSV row, a single utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub query_id: String,
    pub rule: String,
    pub agent_id: String,
    pub round: u32,
    pub resp: Option<u8>,
    pub rebut: Option<u8>,
    pub nonrep: Option<f64>,
    pub evid: u8,
    pub stance: f64,
    pub flags: Vec<String>,
}

pub const METRICS_CSV_HEADER: [&str; 11] = [
    "run_id", "query_id", "rule", "agent_id", "round", "resp", "rebut", "nonrep", "evid",
    "stance", "flags",
];

/// Pieces of a run id of the form
/// `{scenario}__{query}__{rule}__{variant}__r{idx}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunIdParts {
    pub scenario: String,
    pub query_id: String,
    pub rule: String,
    pub variant: String,
    pub run_idx: u32,
}

pub fn parse_run_id(run_id: &str) -> Option<RunIdParts> {
    let parts: Vec<&str> = run_id.split("__").collect();
    if parts.len() != 5 {
        return None;
    }
    let idx = parts[4].strip_prefix('r')?.parse().ok()?;
    Some(RunIdParts {
        scenario: parts[0].to_string(),
        query_id: parts[1].to_string(),
        rule: parts[2].to_string(),
        variant: parts[3].to_string(),
        run_idx: idx,
    })
}

pub fn make_run_id(scenario: &str, query_id: &str, rule: &str, variant: &str, run_idx: u32) -> String {
    format!("{scenario}__{query_id}__{rule}__{variant}__r{run_idx}")
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub evidence_ngram: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            evidence_ngram: DEFAULT_EVIDENCE_NGRAM,
        }
    }
}

/// What the evaluator needs from the run's configuration.
pub struct EvalContext {
    pub personas: BTreeMap<String, String>,
    pub query: String,
    pub sequential: bool,
}

impl EvalContext {
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        Self {
            personas: cfg
                .agents
                .iter()
                .map(|a| (a.id.clone(), a.persona_task.clone()))
                .collect(),
            query: cfg.query.clone(),
            sequential: cfg.sequential,
        }
    }
}

/// Scores every entry of one run. Embeddings are fetched in deduplicated
/// batches; judge metrics are skipped (with a flag) when no judge is given.
pub fn evaluate_run(
    entries: &[TranscriptEntry],
    ctx: &EvalContext,
    embed: &dyn EmbeddingBackend,
    judge: Option<&dyn JudgeBackend>,
    opts: &EvalOptions,
) -> Result<Vec<MetricsRow>, MetricsError> {
    let mut texts: BTreeSet<String> = BTreeSet::new();
    for e in entries {
        texts.insert(e.output.clone());
    }
    for persona in ctx.personas.values() {
        texts.insert(persona.clone());
    }
    let ordered: Vec<String> = texts.into_iter().collect();
    let mut vectors: BTreeMap<&str, Vec<f32>> = BTreeMap::new();
    for batch in ordered.chunks(64) {
        let resp = embed.embed(batch)?;
        if resp.vectors.len() != batch.len() {
            return Err(MetricsError::Parse(format!(
                "embedding batch shape mismatch: {} texts, {} vectors",
                batch.len(),
                resp.vectors.len()
            )));
        }
        for (text, vec) in batch.iter().zip(resp.vectors) {
            vectors.insert(text.as_str(), vec);
        }
    }
    let vec_of = |text: &str| -> &Vec<f32> {
        vectors.get(text).expect("every scored text was embedded")
    };

    let mut rows = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let mut flags: Vec<String> = Vec::new();
        let query_id = parse_run_id(&e.run_id)
            .map(|p| p.query_id)
            .unwrap_or_else(|| "Q1".to_string());

        let persona = ctx.personas.get(&e.agent_id).ok_or_else(|| {
            MetricsError::Parse(format!("no persona recorded for agent '{}'", e.agent_id))
        })?;

        if e.output.trim().is_empty() {
            flags.push("empty_output".to_string());
        }

        let (resp, rebut) = if e.round == 1 {
            flags.push("first_round".to_string());
            (None, None)
        } else {
            match previous_counterpart(entries, i, &e.agent_id, e.round, ctx.sequential) {
                None => {
                    flags.push("no_counterpart".to_string());
                    (None, None)
                }
                Some(prev) => match judge {
                    None => {
                        flags.push("no_judge".to_string());
                        (None, None)
                    }
                    Some(j) => {
                        let mut ask = |task: JudgeTask| -> Result<u8, MetricsError> {
                            let verdict = j.judge(&JudgeRequest {
                                task,
                                query: ctx.query.clone(),
                                prev_speaker: prev.agent_id.clone(),
                                prev_text: prev.output.clone(),
                                curr_speaker: e.agent_id.clone(),
                                curr_text: e.output.clone(),
                            })?;
                            if verdict.parse_failed {
                                flags.push(format!("judge_parse_failed_{}", task.name()));
                            }
                            Ok(verdict.label)
                        };
                        let r = ask(JudgeTask::Responsiveness)?;
                        let b = ask(JudgeTask::Rebuttal)?;
                        (Some(r), Some(b))
                    }
                },
            }
        };

        let nonrep = entries[..i]
            .iter()
            .rev()
            .find(|p| p.agent_id == e.agent_id && p.round == e.round - 1)
            .map(|prev_own| {
                let cos = cosine_f32(vec_of(&e.output), vec_of(&prev_own.output));
                non_repetition(&e.output, &prev_own.output, cos)
            });

        let evidence_texts: Vec<String> = e.evidence.iter().map(|x| x.text.clone()).collect();
        let evid = evidence_usage(&e.output, &evidence_texts, opts.evidence_ngram);

        let stance = cosine_f32(vec_of(&e.output), vec_of(persona));

        rows.push(MetricsRow {
            run_id: e.run_id.clone(),
            query_id,
            rule: e.rule.clone(),
            agent_id: e.agent_id.clone(),
            round: e.round,
            resp,
            rebut,
            nonrep,
            evid,
            stance,
            flags,
        });
    }
    Ok(rows)
}

fn fmt_metric(v: f64) -> String {
    format!("{v:.6}")
}

pub fn write_metrics_csv(rows: &[MetricsRow]) -> Result<String, MetricsError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.run_id.as_str(),
            r.query_id.as_str(),
            r.rule.as_str(),
            r.agent_id.as_str(),
            &r.round.to_string(),
            &r.resp.map(|v| v.to_string()).unwrap_or_default(),
            &r.rebut.map(|v| v.to_string()).unwrap_or_default(),
            &r.nonrep.map(fmt_metric).unwrap_or_default(),
            &r.evid.to_string(),
            &fmt_metric(r.stance),
            &r.flags.join(";"),
        ])?;
    }
    String::from_utf8(w.into_inner().map_err(|e| MetricsError::Parse(e.to_string()))?)
        .map_err(|e| MetricsError::Parse(e.to_string()))
}

pub fn parse_metrics_csv(src: &str) -> Result<Vec<MetricsRow>, MetricsError> {
    let mut reader = csv::Reader::from_reader(src.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != METRICS_CSV_HEADER {
        return Err(MetricsError::Parse(format!(
            "unexpected metrics header: {headers:?}"
        )));
    }
    let parse_opt_u8 = |s: &str, col: &str| -> Result<Option<u8>, MetricsError> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse()
                .map(Some)
                .map_err(|_| MetricsError::Parse(format!("bad {col} value: {s:?}")))
        }
    };
    let mut rows = Vec::new();
    for record in reader.records() {
        let rec = record?;
        let get = |i: usize| rec.get(i).unwrap_or("").to_string();
        rows.push(MetricsRow {
            run_id: get(0),
            query_id: get(1),
            rule: get(2),
            agent_id: get(3),
            round: get(4)
                .parse()
                .map_err(|_| MetricsError::Parse(format!("bad round: {:?}", get(4))))?,
            resp: parse_opt_u8(&get(5), "resp")?,
            rebut: parse_opt_u8(&get(6), "rebut")?,
            nonrep: if get(7).is_empty() {
                None
            } else {
                Some(get(7).parse().map_err(|_| {
                    MetricsError::Parse(format!("bad nonrep: {:?}", get(7)))
                })?)
            },
            evid: get(8)
                .parse()
                .map_err(|_| MetricsError::Parse(format!("bad evid: {:?}", get(8))))?,
            stance: get(9)
                .parse()
                .map_err(|_| MetricsError::Parse(format!("bad stance: {:?}", get(9))))?,
            flags: if get(10).is_empty() {
                vec![]
            } else {
                get(10).split(';').map(str::to_string).collect()
            },
        });
    }
    Ok(rows)
}

pub const METRIC_NAMES: [&str; 5] = ["resp", "rebut", "nonrep", "evid", "stance"];

fn metric_value(row: &MetricsRow, metric: &str) -> Option<f64> {
    match metric {
        "resp" => row.resp.map(f64::from),
        "rebut" => row.rebut.map(f64::from),
        "nonrep" => row.nonrep,
        "evid" => Some(f64::from(row.evid)),
        "stance" => Some(row.stance),
        _ => None,
    }
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Population standard deviation (divide by n).
pub fn population_std(values: &[f64]) -> Option<f64> {
    let m = mean(values)?;
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64;
    Some(var.sqrt())
}

/// Sample standard deviation (divide by n-1); None for fewer than 2 values.
pub fn sample_std(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values)?;
    let var =
        values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() as f64 - 1.0);
    Some(var.sqrt())
}

/// Mean that weighs agents and runs equally: per (run, agent) mean over
/// rounds, then mean over agents within each run, then mean over runs.
pub fn staged_mean(samples: &[(String, String, f64)]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mut by_run: BTreeMap<&str, BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    for (run, agent, v) in samples {
        by_run
            .entry(run.as_str())
            .or_default()
            .entry(agent.as_str())
            .or_default()
            .push(*v);
    }
    let run_means: Vec<f64> = by_run
        .values()
        .map(|agents| {
            let agent_means: Vec<f64> = agents
                .values()
                .map(|vs| mean(vs).expect("non-empty group"))
                .collect();
            mean(&agent_means).expect("non-empty run")
        })
        .collect();
    mean(&run_means)
}

struct CellStats {
    mean: Option<f64>,
    std: Option<f64>,
    n: usize,
}

fn cell_stats(rows: &[&MetricsRow], metric: &str) -> CellStats {
    let samples: Vec<(String, String, f64)> = rows
        .iter()
        .filter_map(|r| metric_value(r, metric).map(|v| (r.run_id.clone(), r.agent_id.clone(), v)))
        .collect();
    let raw: Vec<f64> = samples.iter().map(|(_, _, v)| *v).collect();
    CellStats {
        mean: staged_mean(&samples),
        std: population_std(&raw),
        n: raw.len(),
    }
}

fn fmt_cell(stats: &CellStats) -> String {
    match (stats.mean, stats.std) {
        (Some(m), Some(s)) => format!("{m:.2}\u{b1}{s:.2}"),
        _ => String::new(),
    }
}

fn rule_rank(rule: &str) -> u8 {
    match rule {
        "none" => 0,
        "light" => 1,
        "struct" => 2,
        _ => 3,
    }
}

/// Natural sort for query ids: "Q2" before "Q10"; non-numeric ids sort after,
/// alphabetically.
fn query_sort_key(q: &str) -> (u8, u64, String) {
    let digits: String = q.chars().skip_while(|c| !c.is_ascii_digit()).collect();
    match digits.parse::<u64>() {
        Ok(n) if !digits.is_empty() => (0, n, q.to_string()),
        _ => (1, 0, q.to_string()),
    }
}

pub const REPORT_CSV_HEADER: [&str; 14] = [
    "scenario", "variant", "query", "rule", "resp", "rebut", "nonrep", "evid", "stance",
    "n_resp", "n_rebut", "n_nonrep", "n_evid", "n_stance",
];

pub const SERIES_CSV_HEADER: [&str; 7] =
    ["metric", "rule", "round", "mean", "ci_low", "ci_high", "n"];

#[derive(Debug, Serialize)]
pub struct ReportCellJson {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Serialize)]
pub struct ReportRowJson {
    pub scenario: String,
    pub variant: String,
    pub query: String,
    pub rule: String,
    pub metrics: BTreeMap<String, ReportCellJson>,
}

pub struct ReportOutput {
    pub report_csv: String,
    /// Same aggregate rows as the CSV, unformatted, for machine consumers.
    pub report_json: String,
    pub series_csv: String,
}

/// Builds the aggregate table (one row per scenario, variant, query, rule,
/// plus an Overall row per rule) and the per-round series with 95%
/// confidence intervals over run-level means.
pub fn build_report(rows: &[MetricsRow]) -> Result<ReportOutput, MetricsError> {
    type GroupKey = (String, String, String, String);
    let mut groups: BTreeMap<GroupKey, Vec<&MetricsRow>> = BTreeMap::new();
    for row in rows {
        let (scenario, variant) = match parse_run_id(&row.run_id) {
            Some(p) => (p.scenario, p.variant),
            None => (row.run_id.clone(), "base".to_string()),
        };
        groups
            .entry((scenario, variant, row.query_id.clone(), row.rule.clone()))
            .or_default()
            .push(row);
    }

    let mut scopes: BTreeSet<(String, String)> = BTreeSet::new();
    for (scenario, variant, _, _) in groups.keys() {
        scopes.insert((scenario.clone(), variant.clone()));
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_CSV_HEADER)?;
    let mut json_rows: Vec<ReportRowJson> = Vec::new();
    for (scenario, variant) in &scopes {
        let in_scope: Vec<(&GroupKey, &Vec<&MetricsRow>)> = groups
            .iter()
            .filter(|(k, _)| &k.0 == scenario && &k.1 == variant)
            .collect();
        let mut queries: Vec<String> = in_scope.iter().map(|(k, _)| k.2.clone()).collect();
        queries.sort_by_key(|q| query_sort_key(q));
        queries.dedup();
        let mut rules: Vec<String> = in_scope.iter().map(|(k, _)| k.3.clone()).collect();
        rules.sort_by_key(|r| (rule_rank(r), r.clone()));
        rules.dedup();

        let mut write_row =
            |query_label: &str, rule: &str, cell_rows: &[&MetricsRow]| -> Result<(), MetricsError> {
                let stats: Vec<CellStats> = METRIC_NAMES
                    .iter()
                    .map(|m| cell_stats(cell_rows, m))
                    .collect();
                let mut record: Vec<String> = vec![
                    scenario.clone(),
                    variant.clone(),
                    query_label.to_string(),
                    rule.to_string(),
                ];
                record.extend(stats.iter().map(fmt_cell));
                record.extend(stats.iter().map(|s| s.n.to_string()));
                w.write_record(&record)?;
                json_rows.push(ReportRowJson {
                    scenario: scenario.clone(),
                    variant: variant.clone(),
                    query: query_label.to_string(),
                    rule: rule.to_string(),
                    metrics: METRIC_NAMES
                        .iter()
                        .zip(&stats)
                        .map(|(m, s)| {
                            (
                                m.to_string(),
                                ReportCellJson {
                                    mean: s.mean,
                                    std: s.std,
                                    n: s.n,
                                },
                            )
                        })
                        .collect(),
                });
                Ok(())
            };

        for query in &queries {
            for rule in &rules {
                let key = (
                    scenario.clone(),
                    variant.clone(),
                    query.clone(),
                    rule.clone(),
                );
                if let Some(cell_rows) = groups.get(&key) {
                    write_row(query, rule, cell_rows)?;
                }
            }
        }
        for rule in &rules {
            let pooled: Vec<&MetricsRow> = in_scope
                .iter()
                .filter(|(k, _)| &k.3 == rule)
                .flat_map(|(_, v)| v.iter().copied())
                .collect();
            if !pooled.is_empty() {
                write_row("Overall", rule, &pooled)?;
            }
        }
    }
    let report_csv = String::from_utf8(
        w.into_inner().map_err(|e| MetricsError::Parse(e.to_string()))?,
    )
    .map_err(|e| MetricsError::Parse(e.to_string()))?;
    let report_json = serde_json::to_string_pretty(&serde_json::json!({ "rows": json_rows }))
        .map_err(|e| MetricsError::Parse(e.to_string()))?
        + "\n";

    let series_csv = build_series_csv(rows)?;
    Ok(ReportOutput {
        report_csv,
        report_json,
        series_csv,
    })
}

fn build_series_csv(rows: &[MetricsRow]) -> Result<String, MetricsError> {
    let max_round = rows.iter().map(|r| r.round).max().unwrap_or(0);
    let mut rules: Vec<String> = rows.iter().map(|r| r.rule.clone()).collect();
    rules.sort_by_key(|r| (rule_rank(r), r.clone()));
    rules.dedup();

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SERIES_CSV_HEADER)?;
    for metric in METRIC_NAMES {
        for rule in &rules {
            for round in 1..=max_round {
                let mut by_run: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
                for row in rows
                    .iter()
                    .filter(|r| &r.rule == rule && r.round == round)
                {
                    if let Some(v) = metric_value(row, metric) {
                        by_run.entry(row.run_id.as_str()).or_default().push(v);
                    }
                }
                let run_means: Vec<f64> = by_run
                    .values()
                    .map(|vs| mean(vs).expect("non-empty group"))
                    .collect();
                let n = run_means.len();
                let (m, lo, hi) = match mean(&run_means) {
                    None => (String::new(), String::new(), String::new()),
                    Some(m) => {
                        let half = sample_std(&run_means)
                            .map(|s| 1.96 * s / (n as f64).sqrt())
                            .unwrap_or(0.0);
                        (
                            format!("{m:.4}"),
                            format!("{:.4}", m - half),
                            format!("{:.4}", m + half),
                        )
                    }
                };
                w.write_record([
                    metric,
                    rule.as_str(),
                    &round.to_string(),
                    &m,
                    &lo,
                    &hi,
                    &n.to_string(),
                ])?;
            }
        }
    }
    String::from_utf8(w.into_inner().map_err(|e| MetricsError::Parse(e.to_string()))?)
        .map_err(|e| MetricsError::Parse(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{StubEmbedding, StubJudge};
    use crate::domain::WeightVector;
    use crate::engine::TierTriple;
    use crate::knowledge::EvidenceItem;

    #[test]
    fn stopword_table_is_sorted_for_binary_search() {
        let mut sorted = STOPWORDS.to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, STOPWORDS.to_vec());
    }

    #[test]
    fn tokenisation_lowercases_and_strips_punctuation() {
        assert_eq!(
            tokens("The Mill-wheel turns; grain's ready!"),
            vec!["the", "mill", "wheel", "turns", "grain", "s", "ready"]
        );
        assert_eq!(
            content_tokens("The wheel turns with the grain"),
            vec!["wheel", "turns", "grain"]
        );
    }

    #[test]
    fn token_overlap_counts_multiplicity_against_set() {
        assert_eq!(token_overlap("the red fox runs", "a fox sat"), 0.25);
        assert_eq!(token_overlap("fox fox den", "fox"), 2.0 / 3.0);
        assert_eq!(token_overlap("alpha beta", "gamma delta"), 0.0);
        assert_eq!(token_overlap("", "anything"), 0.0);
        assert_eq!(token_overlap("same same", "same"), 1.0);
    }

    #[test]
    fn non_repetition_of_identical_text_is_zero() {
        for text in [
            "We must rebuild the weir now.",
            "Costs, however, keep rising!",
            "one two three four five six",
        ] {
            assert_eq!(non_repetition(text, text, 1.0), 0.0);
            // Even without embedding support the lexical term forces 0.
            assert_eq!(non_repetition(text, text, 0.0), 0.0);
        }
    }

    #[test]
    fn non_repetition_clamps_negative_cosine() {
        let v = non_repetition("alpha beta gamma", "delta epsilon zeta", -0.9);
        assert_eq!(v, 1.0);
    }

    #[test]
    fn opening_penalty_floors_similarity() {
        let curr = "i believe that we must act now on irrigation";
        let prev = "i believe that we must sleep";
        assert!(opening_matches(curr, prev));
        let v = non_repetition(curr, prev, 0.0);
        assert!((v - 0.4).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn opening_penalty_requires_five_tokens() {
        assert!(!opening_matches("yes indeed", "yes indeed"));
        assert!(!opening_matches(
            "one two three four",
            "one two three four"
        ));
        assert!(opening_matches(
            "one two three four five six",
            "one two three four five seven"
        ));
    }

    #[test]
    fn evidence_usage_needs_six_consecutive_content_tokens() {
        let evidence =
            vec!["mill wheel turns with steady river flow in spring".to_string()];
        // Stopwords inside the quote do not break the run.
        let hit = "the mill and the wheel turns with the steady river flow";
        assert_eq!(evidence_usage(hit, &evidence, 6), 1);
        let miss = "the mill and the wheel turns with the steady brook flow";
        assert_eq!(evidence_usage(miss, &evidence, 6), 0);
        assert_eq!(evidence_usage(hit, &evidence, 7), 0);
        assert_eq!(evidence_usage(hit, &[], 6), 0);
    }

    #[test]
    fn evidence_ngram_threshold_sensitivity_on_stub_corpus() {
        // 50 synthetic utterances with their evidence, rates computed at
        // run lengths 4, 6 and 8 side by side. The default of 6 sits where
        // partial quoting stops counting but real quoting still does.
        use crate::backends::{ChatBackend, ChatMeta, ChatRequest, StubChat};

        let chat = StubChat::synth(3);
        let snippets = [
            "the ledger lists spring repairs at forty silver pieces paid by the mill",
            "sea trout must pass the weir each autumn to reach the gravel beds",
            "the irrigation ditches feed forty acres of barley on the east bank",
            "the charter grants the east bank farms first draw through August",
            "the pond drains to mud in two days without the weir",
        ];
        let mut hits = [0usize; 3];
        for i in 0..50u32 {
            let evidence = vec![snippets[(i as usize) % snippets.len()].to_string()];
            let req = ChatRequest {
                prompt: String::new(),
                meta: ChatMeta {
                    run_seed: 900 + u64::from(i / 10),
                    round: i % 10 + 1,
                    agent_id: format!("agent{}", i % 3),
                    query: "Should the weir be rebuilt this autumn?".to_string(),
                    last_speaker: (i % 10 > 0).then(|| "miller".to_string()),
                    own_previous: None,
                    evidence_texts: evidence.clone(),
                },
            };
            let output = chat.complete(&req).unwrap().text;
            for (slot, n) in [(0usize, 4usize), (1, 6), (2, 8)] {
                hits[slot] += usize::from(evidence_usage(&output, &evidence, n) == 1);
            }
        }
        let rates: Vec<f64> = hits.iter().map(|h| *h as f64 / 50.0).collect();
        println!(
            "evidence usage rate by run length: n=4 {:.2}, n=6 {:.2}, n=8 {:.2}",
            rates[0], rates[1], rates[2]
        );
        assert!(rates[0] >= rates[1] && rates[1] >= rates[2]);
        // Rates frozen from the run above. n=6 matches n=4 (a quote long
        // enough for 4 is long enough for 6 here) while n=8 starts to miss
        // quotes whose content-token run is thinned by stopword removal,
        // so 6 keeps quote detection without rewarding shorter echoes.
        assert!((rates[0] - 0.86).abs() < 1e-9, "n=4 rate {}", rates[0]);
        assert!((rates[1] - 0.86).abs() < 1e-9, "n=6 rate {}", rates[1]);
        assert!((rates[2] - 0.68).abs() < 1e-9, "n=8 rate {}", rates[2]);
    }

    #[test]
    fn shared_raw_run_counts_stopwords() {
        assert!(shared_raw_run_at_least(
            "he said the weir must go",
            "indeed, the weir must go",
            4
        ));
        assert!(!shared_raw_run_at_least("one two three", "one two three", 4));
    }

    fn entry(
        run_id: &str,
        round: u32,
        agent: &str,
        output: &str,
        evidence: Vec<&str>,
    ) -> TranscriptEntry {
        TranscriptEntry {
            run_id: run_id.to_string(),
            round,
            agent_id: agent.to_string(),
            rule: "none".to_string(),
            weights: WeightVector::default(),
            tiers: TierTriple {
                t: crate::domain::Tier::Mid,
                m: crate::domain::Tier::Mid,
                d: crate::domain::Tier::Mid,
            },
            mask: "TMD".to_string(),
            evidence: evidence
                .into_iter()
                .enumerate()
                .map(|(i, text)| EvidenceItem {
                    chunk_id: format!("doc#{i:04}"),
                    score: 0.5,
                    text: text.to_string(),
                })
                .collect(),
            retrieval_query_sha256: "00".to_string(),
            truncated_query: false,
            prompt: String::new(),
            output: output.to_string(),
            latency_ms: 0,
            feedback: None,
        }
    }

    fn eval_ctx() -> EvalContext {
        let mut personas = BTreeMap::new();
        personas.insert(
            "farmer".to_string(),
            "You are the farmer; defend irrigation and harvest needs.".to_string(),
        );
        personas.insert(
            "miller".to_string(),
            "You are the miller; defend the mill pond and steady flow.".to_string(),
        );
        EvalContext {
            personas,
            query: "Should the weir be rebuilt?".to_string(),
            sequential: false,
        }
    }

    fn sample_entries() -> Vec<TranscriptEntry> {
        let rid = "weir__Q1__none__base__r0";
        vec![
            entry(
                rid,
                1,
                "farmer",
                "Fields come first; irrigation ditches feed the barley fields each season.",
                vec!["irrigation ditches feed the barley fields each season"],
            ),
            entry(
                rid,
                1,
                "miller",
                "The pond must stay full for the wheel to turn at all.",
                vec!["the mill pond depends on the weir to stay full"],
            ),
            entry(
                rid,
                2,
                "farmer",
                "I disagree with miller: irrigation ditches feed the barley harvest, and the ledger proves the cost.",
                vec!["the ledger lists spring repairs at forty silver"],
            ),
            entry(
                rid,
                2,
                "miller",
                "However, farmer ignores that the mill pond depends on the weir to stay full all summer.",
                vec!["the mill pond depends on the weir to stay full"],
            ),
        ]
    }

    #[test]
    fn evaluate_run_scores_all_entries() {
        let embed = StubEmbedding::new(64);
        let rows = evaluate_run(
            &sample_entries(),
            &eval_ctx(),
            &embed,
            Some(&StubJudge),
            &EvalOptions::default(),
        )
        .unwrap();
        assert_eq!(rows.len(), 4);

        // Round 1: judge metrics missing, flagged.
        assert_eq!(rows[0].resp, None);
        assert_eq!(rows[0].rebut, None);
        assert_eq!(rows[0].nonrep, None);
        assert!(rows[0].flags.contains(&"first_round".to_string()));

        // Round 2 farmer mentions the miller and disagrees.
        assert_eq!(rows[2].resp, Some(1));
        assert_eq!(rows[2].rebut, Some(1));
        assert!(rows[2].nonrep.is_some());

        // Evidence quoting: round 2 miller quotes its snippet at length.
        assert_eq!(rows[3].evid, 1);
        // Round 1 farmer shares a 6-token content run with its snippet.
        assert_eq!(rows[0].evid, 1);

        // Stance matches an independent recomputation.
        let out_vec = embed.embed_one(&sample_entries()[0].output);
        let persona_vec = embed.embed_one(&eval_ctx().personas["farmer"]);
        let expected = cosine_f32(&out_vec, &persona_vec);
        assert!((rows[0].stance - expected).abs() < 1e-12);

        assert_eq!(rows[0].query_id, "Q1");
        assert_eq!(rows[0].rule, "none");
    }

    #[test]
    fn evaluate_without_judge_flags_missing_metrics() {
        let embed = StubEmbedding::new(64);
        let rows = evaluate_run(
            &sample_entries(),
            &eval_ctx(),
            &embed,
            None,
            &EvalOptions::default(),
        )
        .unwrap();
        assert_eq!(rows[2].resp, None);
        assert!(rows[2].flags.contains(&"no_judge".to_string()));
        assert!(rows[2].nonrep.is_some());
    }

    #[test]
    fn metrics_csv_round_trips() {
        let embed = StubEmbedding::new(64);
        let rows = evaluate_run(
            &sample_entries(),
            &eval_ctx(),
            &embed,
            Some(&StubJudge),
            &EvalOptions::default(),
        )
        .unwrap();
        let csv_text = write_metrics_csv(&rows).unwrap();
        assert!(csv_text.starts_with("run_id,query_id,rule,agent_id,round,resp,rebut,nonrep,evid,stance,flags"));
        let parsed = parse_metrics_csv(&csv_text).unwrap();
        assert_eq!(parsed.len(), rows.len());
        for (a, b) in rows.iter().zip(&parsed) {
            assert_eq!(a.run_id, b.run_id);
            assert_eq!(a.resp, b.resp);
            assert_eq!(a.evid, b.evid);
            assert!((a.stance - b.stance).abs() < 1e-5);
            assert_eq!(a.flags, b.flags);
        }
    }

    #[test]
    fn run_id_parsing_round_trips() {
        let rid = make_run_id("weir", "Q3", "light", "w-high-d", 7);
        let parts = parse_run_id(&rid).unwrap();
        assert_eq!(parts.scenario, "weir");
        assert_eq!(parts.query_id, "Q3");
        assert_eq!(parts.rule, "light");
        assert_eq!(parts.variant, "w-high-d");
        assert_eq!(parts.run_idx, 7);
        assert!(parse_run_id("not a run id").is_none());
    }

    #[test]
    fn staged_mean_weighs_agents_then_runs_equally() {
        // Run 1: agent a (1, 0) -> 0.5; agent b (1, 1, 1) -> 1.0; run mean 0.75.
        // Run 2: agent a (0, 0) -> 0.0; agent b (1) -> 1.0; run mean 0.5.
        let samples: Vec<(String, String, f64)> = [
            ("r1", "a", 1.0),
            ("r1", "a", 0.0),
            ("r1", "b", 1.0),
            ("r1", "b", 1.0),
            ("r1", "b", 1.0),
            ("r2", "a", 0.0),
            ("r2", "a", 0.0),
            ("r2", "b", 1.0),
        ]
        .iter()
        .map(|(r, a, v)| (r.to_string(), a.to_string(), *v))
        .collect();
        let m = staged_mean(&samples).unwrap();
        assert!((m - 0.625).abs() < 1e-12);

        let raw: Vec<f64> = samples.iter().map(|s| s.2).collect();
        let std = population_std(&raw).unwrap();
        assert!((std - (0.625f64 * 0.375).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn std_helpers_match_hand_values() {
        let vals = [2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0];
        assert!((population_std(&vals).unwrap() - 2.0).abs() < 1e-12);
        let two = [1.0, 3.0];
        assert!((sample_std(&two).unwrap() - std::f64::consts::SQRT_2).abs() < 1e-12);
        assert_eq!(sample_std(&[1.0]), None);
        assert_eq!(population_std(&[]), None);
    }

    fn report_fixture_rows() -> Vec<MetricsRow> {
        let mut rows = Vec::new();
        for (query, rule, run, agent, round, resp, nonrep, evid, stance) in [
            ("Q1", "none", 0, "a", 1, None, None, 1, 0.5),
            ("Q1", "none", 0, "a", 2, Some(1), Some(0.8), 0, 0.4),
            ("Q1", "none", 0, "b", 1, None, None, 0, 0.3),
            ("Q1", "none", 0, "b", 2, Some(0), Some(0.6), 1, 0.6),
            ("Q2", "light", 0, "a", 1, None, None, 1, 0.2),
            ("Q2", "light", 0, "a", 2, Some(1), Some(0.9), 1, 0.1),
        ] {
            rows.push(MetricsRow {
                run_id: make_run_id("weir", query, rule, "base", run),
                query_id: query.to_string(),
                rule: rule.to_string(),
                agent_id: agent.to_string(),
                round,
                resp,
                rebut: resp,
                nonrep,
                evid,
                stance,
                flags: vec![],
            });
        }
        rows
    }

    #[test]
    fn report_has_query_rule_rows_and_overall() {
        let out = build_report(&report_fixture_rows()).unwrap();
        let lines: Vec<&str> = out.report_csv.lines().collect();
        assert_eq!(
            lines[0],
            "scenario,variant,query,rule,resp,rebut,nonrep,evid,stance,n_resp,n_rebut,n_nonrep,n_evid,n_stance"
        );
        assert!(lines.iter().any(|l| l.starts_with("weir,base,Q1,none,")));
        assert!(lines.iter().any(|l| l.starts_with("weir,base,Q2,light,")));
        assert!(lines.iter().any(|l| l.starts_with("weir,base,Overall,none,")));
        assert!(lines.iter().any(|l| l.starts_with("weir,base,Overall,light,")));

        // Q1/none: resp samples are 1 and 0 -> staged mean 0.5, pop std 0.5, n 2.
        let q1 = lines
            .iter()
            .find(|l| l.starts_with("weir,base,Q1,none,"))
            .unwrap();
        let fields: Vec<&str> = q1.split(',').collect();
        assert_eq!(fields[4], "0.50\u{b1}0.50");
        assert_eq!(fields[9], "2");
        // Stance: agent a mean 0.45, b mean 0.45 -> 0.45.
        assert_eq!(fields[8].split('\u{b1}').next().unwrap(), "0.45");
        assert_eq!(fields[13], "4");
    }

    #[test]
    fn series_emits_all_rounds_and_handles_single_run() {
        let out = build_report(&report_fixture_rows()).unwrap();
        let lines: Vec<&str> = out.series_csv.lines().collect();
        assert_eq!(lines[0], "metric,rule,round,mean,ci_low,ci_high,n");
        // resp at round 1 has no samples: empty cells, n = 0.
        assert!(lines.contains(&"resp,none,1,,,,0"));
        // Single run: ci collapses to the mean.
        let r2 = lines
            .iter()
            .find(|l| l.starts_with("resp,none,2,"))
            .unwrap();
        let f: Vec<&str> = r2.split(',').collect();
        assert_eq!(f[3], f[4]);
        assert_eq!(f[4], f[5]);
        assert_eq!(f[6], "1");
        // evid is defined from round 1.
        let e1 = lines
            .iter()
            .find(|l| l.starts_with("evid,none,1,"))
            .unwrap();
        assert!(e1.split(',').nth(3).unwrap().len() > 0);
    }

    #[test]
    fn query_ordering_is_natural_with_overall_last() {
        let mut rows = Vec::new();
        for q in ["Q10", "Q2", "Q1"] {
            rows.push(MetricsRow {
                run_id: make_run_id("s", q, "none", "base", 0),
                query_id: q.to_string(),
                rule: "none".to_string(),
                agent_id: "a".to_string(),
                round: 1,
                resp: None,
                rebut: None,
                nonrep: None,
                evid: 1,
                stance: 0.0,
                flags: vec![],
            });
        }
        let out = build_report(&rows).unwrap();
        let order: Vec<&str> = out
            .report_csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap())
            .collect();
        assert_eq!(order, vec!["Q1", "Q2", "Q10", "Overall"]);
    }
}
