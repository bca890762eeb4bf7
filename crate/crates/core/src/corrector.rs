//! SQL self-correction: a feedback agent diagnoses discrepancies between the
//! gold and predicted SQL, a correction agent rewrites the prediction and
//! drafts reusable guidelines, and a deterministic manager sequences the loop
//! and commits guidelines on success.
//!
//! The loop consumes ground truth and therefore runs offline (training /
//! post-hoc refinement). At pure inference only the guideline store is
//! consulted, through [`apply_guidelines_at_inference`].

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Example, SchemaCatalog};
use crate::digest::{sha256_hex, short_id};
use crate::llm::{LlmBackend, LlmError, LlmRequest, Message};
use crate::metrics::exec::{execution_accuracy, ExecOutcome};
use crate::prompt::{render_template, TemplateError};
use crate::sqlgen::{extract_sql, SqlCandidate};

#[derive(Debug, Error)]
pub enum CorrectorError {
    #[error("llm backend: {0}")]
    Backend(#[from] LlmError),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("unparseable feedback reply after retry; raw reply:\n{raw}")]
    UnparseableFeedback { raw: String },
    #[error("no SQL found in correction reply after retry; raw reply:\n{raw}")]
    NoSqlInReply { raw: String },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("example `{0}` has no executable database file")]
    MissingDatabase(String),
    #[error("guideline store i/o at `{path}`: {message}")]
    Store { path: String, message: String },
}

/// Closed category set for discrepancies and guidelines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscrepancyCategory {
    MissingJoin,
    WrongColumn,
    WrongTable,
    Aggregation,
    FilterCondition,
    OrderingLimit,
    Grouping,
    ValueLiteral,
    Other,
}

impl DiscrepancyCategory {
    /// Unknown names project onto `Other`.
    pub fn parse(text: &str) -> Self {
        match text.trim().to_lowercase().as_str() {
            "missing_join" => Self::MissingJoin,
            "wrong_column" => Self::WrongColumn,
            "wrong_table" => Self::WrongTable,
            "aggregation" => Self::Aggregation,
            "filter_condition" => Self::FilterCondition,
            "ordering_limit" => Self::OrderingLimit,
            "grouping" => Self::Grouping,
            "value_literal" => Self::ValueLiteral,
            _ => Self::Other,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::MissingJoin => "missing_join",
            Self::WrongColumn => "wrong_column",
            Self::WrongTable => "wrong_table",
            Self::Aggregation => "aggregation",
            Self::FilterCondition => "filter_condition",
            Self::OrderingLimit => "ordering_limit",
            Self::Grouping => "grouping",
            Self::ValueLiteral => "value_literal",
            Self::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub category: DiscrepancyCategory,
    pub detail: String,
}

/// Diagnosis of why the predicted SQL diverges from the gold SQL.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedbackReport {
    pub discrepancies: Vec<Discrepancy>,
    pub raw: String,
}

/// A guideline draft as extracted from a correction reply, before it is
/// committed with identity and provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidelineDraft {
    pub category: DiscrepancyCategory,
    pub instruction: String,
}

/// A committed correction guideline in the knowledge base.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionGuideline {
    pub id: String,
    pub category: DiscrepancyCategory,
    pub instruction: String,
    pub origin_example_id: String,
    pub created_iteration: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Manager,
    Feedback,
    Correction,
    Execution,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    pub agent: AgentKind,
    pub input_digest: String,
    pub output_digest: String,
}

/// Result of one correction loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrectionOutcome {
    pub final_sql: SqlCandidate,
    pub iterations_used: u32,
    /// True iff the final candidate matches the gold result on execution.
    pub resolved: bool,
    pub trace: Vec<TraceStep>,
    /// Backend failure that ended the loop early, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

const FEEDBACK_REMINDER: &str =
    "\n\nReminder: reply ONLY with the fenced <<<feedback block in the exact format requested.";
const CORRECTION_REMINDER: &str =
    "\n\nReminder: reply with the corrected SQL in a ```sql fenced block (and optionally a <<<guidelines block).";

/// Default feedback-agent prompt; placeholders: gold, pred, exec_diff.
pub const DEFAULT_FEEDBACK_TEMPLATE: &str = "\
Compare the correct SQL with the incorrectly predicted SQL and categorize every discrepancy.

Correct SQL:
{{gold}}

Predicted SQL:
{{pred}}

Execution difference: {{exec_diff}}

Categories: missing_join, wrong_column, wrong_table, aggregation, filter_condition, ordering_limit, grouping, value_literal, other.
Reply with exactly one fenced block, one discrepancy per line:
<<<feedback
category :: what is wrong
>>>";

/// Default correction-agent prompt; placeholders: pred, feedback, guidelines.
pub const DEFAULT_CORRECTION_TEMPLATE: &str = "\
Rewrite the predicted SQL so it fixes every reported discrepancy.

Predicted SQL:
{{pred}}

Discrepancies:
{{feedback}}

Known guidelines:
{{guidelines}}

Reply with the corrected SQL in a ```sql fenced block. If the fix suggests a reusable lesson, add:
<<<guidelines
category :: one-sentence instruction
>>>";

fn parse_feedback_block(reply: &str) -> Option<Vec<Discrepancy>> {
    let body = block_between(reply, "<<<feedback")?;
    let mut out = Vec::new();
    for line in body.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (cat, detail) = line.split_once("::")?;
        out.push(Discrepancy {
            category: DiscrepancyCategory::parse(cat),
            detail: detail.trim().to_string(),
        });
    }
    if out.is_empty() {
        None
    } else {
        Some(out)
    }
}

fn parse_guidelines_block(reply: &str) -> Vec<GuidelineDraft> {
    let Some(body) = block_between(reply, "<<<guidelines") else {
        return Vec::new();
    };
    body.lines()
        .filter_map(|line| {
            let line = line.trim();
            if line.is_empty() {
                return None;
            }
            let (cat, instruction) = line.split_once("::")?;
            let instruction = instruction.trim();
            (!instruction.is_empty()).then(|| GuidelineDraft {
                category: DiscrepancyCategory::parse(cat),
                instruction: instruction.to_string(),
            })
        })
        .collect()
}

fn block_between<'a>(text: &'a str, opener: &str) -> Option<&'a str> {
    let start = text.find(opener)?;
    let after = &text[start + opener.len()..];
    let body_start = after.find('\n')? + 1;
    let body = &after[body_start..];
    let end = body.find(">>>")?;
    Some(&body[..end])
}

/// Diagnose the failed prediction against the gold SQL. The execution diff
/// summary is included in the prompt. One format-reminder retry.
pub fn feedback(
    gold_sql: &str,
    pred_sql: &str,
    exec_diff: &str,
    llm: &dyn LlmBackend,
    template: &str,
) -> Result<FeedbackReport, CorrectorError> {
    if gold_sql.trim() == pred_sql.trim() {
        return Err(CorrectorError::Precondition(
            "predicted SQL is identical to gold; nothing to diagnose".into(),
        ));
    }
    let prompt = render_template(
        template,
        &[("gold", gold_sql), ("pred", pred_sql), ("exec_diff", exec_diff)],
    )?;

    let request = LlmRequest::new("feedback", vec![Message::user(prompt.clone())]);
    let response = llm.complete(&request)?;
    if let Some(discrepancies) = parse_feedback_block(&response.text) {
        return Ok(FeedbackReport { discrepancies, raw: response.text });
    }

    let retry = LlmRequest::new("feedback", vec![Message::user(format!("{prompt}{FEEDBACK_REMINDER}"))]);
    let response = llm.complete(&retry)?;
    match parse_feedback_block(&response.text) {
        Some(discrepancies) => Ok(FeedbackReport { discrepancies, raw: response.text }),
        None => Err(CorrectorError::UnparseableFeedback { raw: response.text }),
    }
}

/// Rewrite the prediction guided by the feedback report and any known
/// guidelines; also extract guideline drafts from the reply.
pub fn correct(
    pred: &SqlCandidate,
    report: &FeedbackReport,
    guidelines: &[CorrectionGuideline],
    llm: &dyn LlmBackend,
    template: &str,
) -> Result<(SqlCandidate, Vec<GuidelineDraft>), CorrectorError> {
    if report.discrepancies.is_empty() {
        return Err(CorrectorError::Precondition("feedback report has no discrepancies".into()));
    }
    let feedback_lines: Vec<String> = report
        .discrepancies
        .iter()
        .map(|d| format!("- {}: {}", d.category.as_str(), d.detail))
        .collect();
    let guideline_lines = if guidelines.is_empty() {
        "(none)".to_string()
    } else {
        guidelines
            .iter()
            .map(|g| format!("- {}: {}", g.category.as_str(), g.instruction))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let prompt = render_template(
        template,
        &[
            ("pred", pred.sql.as_str()),
            ("feedback", &feedback_lines.join("\n")),
            ("guidelines", &guideline_lines),
        ],
    )?;

    let request = LlmRequest::new("correction", vec![Message::user(prompt.clone())]);
    let response = llm.complete(&request)?;
    if let Some(sql) = extract_sql(&response.text) {
        let candidate = SqlCandidate::corrected(sql, pred, sha256_hex(&prompt), response.backend_id);
        return Ok((candidate, parse_guidelines_block(&response.text)));
    }

    let retry_prompt = format!("{prompt}{CORRECTION_REMINDER}");
    let retry = LlmRequest::new("correction", vec![Message::user(retry_prompt.clone())]);
    let response = llm.complete(&retry)?;
    match extract_sql(&response.text) {
        Some(sql) => {
            let candidate = SqlCandidate::corrected(sql, pred, sha256_hex(&retry_prompt), response.backend_id);
            Ok((candidate, parse_guidelines_block(&response.text)))
        }
        None => Err(CorrectorError::NoSqlInReply { raw: response.text }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentAction {
    Feedback,
    Correction,
}

/// Loop bookkeeping consumed by the manager.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopState {
    /// Correction rounds completed so far.
    pub iteration: u32,
    pub max_iterations: u32,
    pub last_action: Option<AgentAction>,
    /// Execution result of the latest candidate, once known.
    pub last_ex_pass: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NextAction {
    RunFeedback,
    RunCorrection,
    CommitGuidelinesAndStop,
    StopFailure,
}

/// The manager's deterministic policy: start with feedback, correct after
/// feedback, and after a correction either stop on success, loop on failure
/// with budget left, or give up.
pub fn manage(state: &LoopState) -> NextAction {
    match state.last_action {
        None => NextAction::RunFeedback,
        Some(AgentAction::Feedback) => NextAction::RunCorrection,
        Some(AgentAction::Correction) => match state.last_ex_pass {
            Some(true) => NextAction::CommitGuidelinesAndStop,
            _ if state.iteration < state.max_iterations => NextAction::RunFeedback,
            _ => NextAction::StopFailure,
        },
    }
}

/// Append-only guideline knowledge base with exact-instruction dedup.
/// Commits are serialized; readers get consistent snapshots.
#[derive(Debug)]
pub struct GuidelineStore {
    path: Option<PathBuf>,
    inner: Mutex<Vec<CorrectionGuideline>>,
}

impl GuidelineStore {
    pub fn in_memory() -> Self {
        Self { path: None, inner: Mutex::new(Vec::new()) }
    }

    /// Open (or lazily create) a JSON-lines store at `path`.
    pub fn open(path: &Path) -> Result<Self, CorrectorError> {
        let store_err =
            |message: String| CorrectorError::Store { path: path.display().to_string(), message };
        let mut entries = Vec::new();
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| store_err(e.to_string()))?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let g: CorrectionGuideline = serde_json::from_str(line)
                    .map_err(|e| store_err(format!("line {}: {e}", i + 1)))?;
                entries.push(g);
            }
        }
        Ok(Self { path: Some(path.to_path_buf()), inner: Mutex::new(entries) })
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> Vec<CorrectionGuideline> {
        self.inner.lock().unwrap().clone()
    }

    /// Commit new guidelines, deduplicating by exact instruction text against
    /// both the store and the batch. The file append is a single write.
    pub fn commit(&self, batch: Vec<CorrectionGuideline>) -> Result<usize, CorrectorError> {
        let mut inner = self.inner.lock().unwrap();
        let mut fresh: Vec<CorrectionGuideline> = Vec::new();
        for g in batch {
            let duplicate = inner.iter().chain(fresh.iter()).any(|e| e.instruction == g.instruction);
            if !duplicate {
                fresh.push(g);
            }
        }
        if fresh.is_empty() {
            return Ok(0);
        }
        if let Some(path) = &self.path {
            let store_err =
                |message: String| CorrectorError::Store { path: path.display().to_string(), message };
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| store_err(e.to_string()))?;
            }
            let mut chunk = String::new();
            for g in &fresh {
                chunk.push_str(&serde_json::to_string(g).map_err(|e| store_err(e.to_string()))?);
                chunk.push('\n');
            }
            use std::io::Write;
            let mut file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| store_err(e.to_string()))?;
            file.write_all(chunk.as_bytes()).map_err(|e| store_err(e.to_string()))?;
            file.flush().map_err(|e| store_err(e.to_string()))?;
        }
        let added = fresh.len();
        inner.extend(fresh);
        Ok(added)
    }

    /// Up to `top_m` guidelines, most recently committed first, optionally
    /// filtered by category.
    pub fn select(&self, top_m: usize, category: Option<DiscrepancyCategory>) -> Vec<CorrectionGuideline> {
        let inner = self.inner.lock().unwrap();
        inner
            .iter()
            .rev()
            .filter(|g| category.map_or(true, |c| g.category == c))
            .take(top_m)
            .cloned()
            .collect()
    }
}

/// Inference-time guideline selection: the chosen instructions are handed to
/// the SQL-generation prompt builder.
pub fn apply_guidelines_at_inference(
    q_augmented: &str,
    schema_text: &crate::sqlgen::SchemaText,
    template: &str,
    store: &GuidelineStore,
    top_m: usize,
    category_hint: Option<DiscrepancyCategory>,
) -> Result<String, crate::sqlgen::SqlGenError> {
    let instructions: Vec<String> =
        store.select(top_m, category_hint).into_iter().map(|g| g.instruction).collect();
    crate::sqlgen::build_prompt(q_augmented, schema_text, template, &instructions)
}

/// Prompt templates for the two LLM agents.
pub struct CorrectorTemplates<'a> {
    pub feedback: &'a str,
    pub correction: &'a str,
}

impl Default for CorrectorTemplates<'_> {
    fn default() -> Self {
        Self { feedback: DEFAULT_FEEDBACK_TEMPLATE, correction: DEFAULT_CORRECTION_TEMPLATE }
    }
}

/// Stable identifier for an example, used for guideline provenance.
pub fn example_id(example: &Example) -> String {
    short_id(&format!("{}\u{1f}{}\u{1f}{}", example.db_id, example.question, example.gold_sql))
}

/// Drive the manager policy until the loop stops. Every intermediate
/// candidate is re-checked with execution accuracy; guideline drafts are
/// committed only when the loop ends resolved. A backend failure mid-loop
/// ends the loop with `resolved = false` and the trace preserved.
#[allow(clippy::too_many_arguments)]
pub fn run_correction_loop(
    example: &Example,
    pred: &SqlCandidate,
    catalog: &SchemaCatalog,
    llm: &dyn LlmBackend,
    guideline_store: &GuidelineStore,
    max_iterations: u32,
    templates: &CorrectorTemplates,
    exec_timeout: Duration,
) -> Result<CorrectionOutcome, CorrectorError> {
    let db_path = catalog
        .db_file(&example.db_id)
        .ok_or_else(|| CorrectorError::MissingDatabase(example.db_id.clone()))?
        .to_path_buf();

    let mut trace = Vec::new();
    let mut check = |sql: &str| -> ExecOutcome {
        let outcome = execution_accuracy(sql, &example.gold_sql, &db_path, exec_timeout);
        trace.push(TraceStep {
            agent: AgentKind::Execution,
            input_digest: sha256_hex(sql),
            output_digest: sha256_hex(&format!("{outcome:?}")),
        });
        outcome
    };

    let mut current = pred.clone();
    let mut last_exec = check(&current.sql);
    if last_exec.is_match {
        return Ok(CorrectionOutcome {
            final_sql: current,
            iterations_used: 0,
            resolved: true,
            trace,
            failure: None,
        });
    }

    let mut state = LoopState {
        iteration: 0,
        max_iterations,
        last_action: None,
        last_ex_pass: Some(false),
    };
    let mut drafts: Vec<(GuidelineDraft, u32)> = Vec::new();
    let mut last_feedback: Option<FeedbackReport> = None;

    loop {
        let action = manage(&state);
        trace.push(TraceStep {
            agent: AgentKind::Manager,
            input_digest: sha256_hex(&format!("{state:?}")),
            output_digest: sha256_hex(&format!("{action:?}")),
        });

        match action {
            NextAction::RunFeedback => {
                let diff = last_exec.diff_summary();
                match feedback(&example.gold_sql, &current.sql, &diff, llm, templates.feedback) {
                    Ok(report) => {
                        trace.push(TraceStep {
                            agent: AgentKind::Feedback,
                            input_digest: sha256_hex(&format!("{}\u{1f}{diff}", current.sql)),
                            output_digest: sha256_hex(&report.raw),
                        });
                        last_feedback = Some(report);
                        state.last_action = Some(AgentAction::Feedback);
                    }
                    Err(CorrectorError::Backend(e)) => {
                        return Ok(failure_outcome(current, state.iteration, trace, e.to_string()))
                    }
                    Err(CorrectorError::UnparseableFeedback { raw }) => {
                        return Ok(failure_outcome(
                            current,
                            state.iteration,
                            trace,
                            format!("unparseable feedback: {raw}"),
                        ))
                    }
                    Err(other) => return Err(other),
                }
            }
            NextAction::RunCorrection => {
                let report = last_feedback.as_ref().expect("correction follows feedback");
                let known = guideline_store.snapshot();
                match correct(&current, report, &known, llm, templates.correction) {
                    Ok((candidate, new_drafts)) => {
                        trace.push(TraceStep {
                            agent: AgentKind::Correction,
                            input_digest: sha256_hex(&current.sql),
                            output_digest: sha256_hex(&candidate.sql),
                        });
                        state.iteration += 1;
                        for d in new_drafts {
                            drafts.push((d, state.iteration));
                        }
                        current = candidate;
                        last_exec = check(&current.sql);
                        state.last_ex_pass = Some(last_exec.is_match);
                        state.last_action = Some(AgentAction::Correction);
                    }
                    Err(CorrectorError::Backend(e)) => {
                        return Ok(failure_outcome(current, state.iteration, trace, e.to_string()))
                    }
                    Err(CorrectorError::NoSqlInReply { raw }) => {
                        return Ok(failure_outcome(
                            current,
                            state.iteration,
                            trace,
                            format!("no SQL in correction reply: {raw}"),
                        ))
                    }
                    Err(other) => return Err(other),
                }
            }
            NextAction::CommitGuidelinesAndStop => {
                let ex_id = example_id(example);
                let batch: Vec<CorrectionGuideline> = drafts
                    .iter()
                    .map(|(d, iteration)| CorrectionGuideline {
                        id: short_id(&d.instruction),
                        category: d.category,
                        instruction: d.instruction.clone(),
                        origin_example_id: ex_id.clone(),
                        created_iteration: *iteration,
                    })
                    .collect();
                guideline_store.commit(batch)?;
                return Ok(CorrectionOutcome {
                    final_sql: current,
                    iterations_used: state.iteration,
                    resolved: true,
                    trace,
                    failure: None,
                });
            }
            NextAction::StopFailure => {
                return Ok(CorrectionOutcome {
                    final_sql: current,
                    iterations_used: state.iteration,
                    resolved: false,
                    trace,
                    failure: None,
                });
            }
        }
    }
}

fn failure_outcome(
    final_sql: SqlCandidate,
    iterations_used: u32,
    trace: Vec<TraceStep>,
    failure: String,
) -> CorrectionOutcome {
    CorrectionOutcome { final_sql, iterations_used, resolved: false, trace, failure: Some(failure) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ScriptedBackend;
    use rusqlite::Connection;

    fn fixture_db(dir: &tempfile::TempDir) -> PathBuf {
        let path = dir.path().join("loopdb.sqlite");
        let conn = Connection::open(&path).unwrap();
        conn.execute_batch(
            "CREATE TABLE stations (id INTEGER PRIMARY KEY, city TEXT, num_pumps INTEGER);
             INSERT INTO stations VALUES (1, 'Berlin', 4), (2, 'Paris', 1), (3, 'Rome', 2);",
        )
        .unwrap();
        path
    }

    fn catalog_for(db_id: &str, db_file: PathBuf) -> SchemaCatalog {
        use crate::corpus::{CatalogEntry, DatabaseSchema};
        let mut entries = std::collections::BTreeMap::new();
        entries.insert(
            db_id.to_string(),
            CatalogEntry {
                schema: DatabaseSchema { db_id: db_id.to_string(), tables: vec![], foreign_keys: vec![] },
                db_file: Some(db_file),
            },
        );
        SchemaCatalog { entries }
    }

    fn example(db_id: &str, gold: &str) -> Example {
        Example {
            question: "how many pumps?".into(),
            db_id: db_id.into(),
            gold_sql: gold.into(),
            difficulty_tag: None,
        }
    }

    fn candidate(sql: &str) -> SqlCandidate {
        SqlCandidate::generated(sql.into(), "fix", "digest".into(), "test".into())
    }

    fn feedback_prompt(gold: &str, pred: &str, diff: &str) -> String {
        render_template(
            DEFAULT_FEEDBACK_TEMPLATE,
            &[("gold", gold), ("pred", pred), ("exec_diff", diff)],
        )
        .unwrap()
    }

    fn correction_prompt(pred: &str, feedback_lines: &str, guidelines: &str) -> String {
        render_template(
            DEFAULT_CORRECTION_TEMPLATE,
            &[("pred", pred), ("feedback", feedback_lines), ("guidelines", guidelines)],
        )
        .unwrap()
    }

    #[test]
    fn test_feedback_missing_join_category() {
        // The scripted diagnosis is authored from a real diff: the predicted
        // query skips the ownership join and over-counts.
        let gold = "SELECT count(*) FROM stations JOIN ownership ON stations.id = ownership.station_id";
        let pred = "SELECT count(*) FROM stations";
        let diff = "row counts: predicted 3, expected 2";
        let mut backend = ScriptedBackend::new();
        backend.insert_for(
            &LlmRequest::new("feedback", vec![Message::user(feedback_prompt(gold, pred, diff))]),
            "<<<feedback\nmissing_join :: the prediction does not join ownership\n>>>",
        );
        let report = feedback(gold, pred, diff, &backend, DEFAULT_FEEDBACK_TEMPLATE).unwrap();
        assert_eq!(report.discrepancies.len(), 1);
        assert_eq!(report.discrepancies[0].category, DiscrepancyCategory::MissingJoin);
    }

    #[test]
    fn test_feedback_identical_inputs_rejected() {
        let backend = ScriptedBackend::new();
        let err = feedback("SELECT 1", "SELECT 1", "", &backend, DEFAULT_FEEDBACK_TEMPLATE).unwrap_err();
        assert!(matches!(err, CorrectorError::Precondition(_)));
    }

    #[test]
    fn test_feedback_unknown_category_maps_to_other() {
        let gold = "SELECT a FROM t";
        let pred = "SELECT b FROM t";
        let mut backend = ScriptedBackend::new();
        backend.insert_for(
            &LlmRequest::new("feedback", vec![Message::user(feedback_prompt(gold, pred, "d"))]),
            "<<<feedback\nexotic_new_category :: something odd\n>>>",
        );
        let report = feedback(gold, pred, "d", &backend, DEFAULT_FEEDBACK_TEMPLATE).unwrap();
        assert_eq!(report.discrepancies[0].category, DiscrepancyCategory::Other);
        assert_eq!(report.discrepancies[0].detail, "something odd");
    }

    fn one_discrepancy_report() -> FeedbackReport {
        FeedbackReport {
            discrepancies: vec![Discrepancy {
                category: DiscrepancyCategory::FilterCondition,
                detail: "missing filter".into(),
            }],
            raw: String::new(),
        }
    }

    #[test]
    fn test_correct_extracts_sql_and_guidelines() {
        let pred = candidate("SELECT city FROM stations");
        let report = one_discrepancy_report();
        let prompt = correction_prompt(
            &pred.sql,
            "- filter_condition: missing filter",
            "(none)",
        );
        let mut backend = ScriptedBackend::new();
        backend.insert_for(
            &LlmRequest::new("correction", vec![Message::user(prompt)]),
            "```sql\nSELECT city FROM stations WHERE num_pumps > 1\n```\n\
             <<<guidelines\nfilter_condition :: mirror the gold filter columns\nwrong_column :: check selected columns\n>>>",
        );
        let (fixed, drafts) = correct(&pred, &report, &[], &backend, DEFAULT_CORRECTION_TEMPLATE).unwrap();
        assert_eq!(fixed.sql, "SELECT city FROM stations WHERE num_pumps > 1");
        assert_eq!(fixed.iteration, 1);
        assert_eq!(drafts.len(), 2);
        assert_eq!(drafts[0].category, DiscrepancyCategory::FilterCondition);
        assert_eq!(drafts[1].category, DiscrepancyCategory::WrongColumn);
    }

    #[test]
    fn test_correct_requires_nonempty_feedback() {
        let pred = candidate("SELECT 1");
        let empty = FeedbackReport { discrepancies: vec![], raw: String::new() };
        let backend = ScriptedBackend::new();
        let err = correct(&pred, &empty, &[], &backend, DEFAULT_CORRECTION_TEMPLATE).unwrap_err();
        assert!(matches!(err, CorrectorError::Precondition(_)));
    }

    #[test]
    fn test_manage_policy_table() {
        let fresh = LoopState { iteration: 0, max_iterations: 3, last_action: None, last_ex_pass: Some(false) };
        assert_eq!(manage(&fresh), NextAction::RunFeedback);

        let after_feedback = LoopState { last_action: Some(AgentAction::Feedback), ..fresh.clone() };
        assert_eq!(manage(&after_feedback), NextAction::RunCorrection);

        let pass = LoopState {
            iteration: 1,
            max_iterations: 3,
            last_action: Some(AgentAction::Correction),
            last_ex_pass: Some(true),
        };
        assert_eq!(manage(&pass), NextAction::CommitGuidelinesAndStop);

        let fail_with_budget = LoopState { last_ex_pass: Some(false), ..pass.clone() };
        assert_eq!(manage(&fail_with_budget), NextAction::RunFeedback);

        let fail_at_cap = LoopState { iteration: 3, ..fail_with_budget };
        assert_eq!(manage(&fail_at_cap), NextAction::StopFailure);
    }

    /// Script a full loop: wrong SQL, feedback, then a correction whose reply
    /// is `fixed_replies[i]` on iteration i.
    fn scripted_loop_backend(
        gold: &str,
        states: &[(String, String)], // (pred_sql at feedback time, correction reply)
        diffs: &[String],
    ) -> ScriptedBackend {
        let mut backend = ScriptedBackend::new();
        for ((pred_sql, correction_reply), diff) in states.iter().zip(diffs) {
            backend.insert_for(
                &LlmRequest::new("feedback", vec![Message::user(feedback_prompt(gold, pred_sql, diff))]),
                "<<<feedback\nfilter_condition :: wrong or missing filter\n>>>",
            );
            let prompt = correction_prompt(pred_sql, "- filter_condition: wrong or missing filter", "(none)");
            backend.insert_for(
                &LlmRequest::new("correction", vec![Message::user(prompt)]),
                correction_reply,
            );
        }
        backend
    }

    #[test]
    fn test_loop_fixes_on_first_iteration() {
        let dir = tempfile::tempdir().unwrap();
        let db = fixture_db(&dir);
        let catalog = catalog_for("fix", db.clone());
        let gold = "SELECT city FROM stations WHERE num_pumps > 1";
        let wrong = "SELECT city FROM stations";
        let ex = example("fix", gold);
        let pred = candidate(wrong);

        let wrong_exec = execution_accuracy(wrong, gold, &db, Duration::from_secs(5));
        let backend = scripted_loop_backend(
            gold,
            &[(wrong.to_string(), format!("```sql\n{gold}\n```\n<<<guidelines\nfilter_condition :: keep the pump filter\n>>>"))],
            &[wrong_exec.diff_summary()],
        );

        let store = GuidelineStore::in_memory();
        let outcome = run_correction_loop(
            &ex,
            &pred,
            &catalog,
            &backend,
            &store,
            3,
            &CorrectorTemplates::default(),
            Duration::from_secs(5),
        )
        .unwrap();

        assert!(outcome.resolved);
        assert_eq!(outcome.iterations_used, 1);
        assert_eq!(outcome.final_sql.sql, gold);
        assert_eq!(outcome.final_sql.iteration, 1);
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn test_loop_never_fixing_hits_cap() {
        let dir = tempfile::tempdir().unwrap();
        let db = fixture_db(&dir);
        let catalog = catalog_for("fix", db.clone());
        let gold = "SELECT city FROM stations WHERE num_pumps > 1";
        let wrong = "SELECT city FROM stations";
        let ex = example("fix", gold);
        let pred = candidate(wrong);

        // The correction agent returns the same wrong SQL every round. After
        // round 1 the prompt repeats, so one scripted state covers all rounds.
        let wrong_exec = execution_accuracy(wrong, gold, &db, Duration::from_secs(5));
        let backend = scripted_loop_backend(
            gold,
            &[(wrong.to_string(), format!("```sql\n{wrong}\n```"))],
            &[wrong_exec.diff_summary()],
        );

        let store = GuidelineStore::in_memory();
        let outcome = run_correction_loop(
            &ex,
            &pred,
            &catalog,
            &backend,
            &store,
            3,
            &CorrectorTemplates::default(),
            Duration::from_secs(5),
        )
        .unwrap();

        assert!(!outcome.resolved);
        assert_eq!(outcome.iterations_used, 3);
        // Failed loops leave the store untouched.
        assert_eq!(store.len(), 0);
    }

    #[test]
    fn test_loop_skips_already_passing_pred() {
        let dir = tempfile::tempdir().unwrap();
        let db = fixture_db(&dir);
        let catalog = catalog_for("fix", db);
        let gold = "SELECT city FROM stations";
        let ex = example("fix", gold);
        let pred = candidate("SELECT city FROM stations ORDER BY id");

        // No scripted entries needed: the loop must not call the backend.
        let backend = ScriptedBackend::new();
        let store = GuidelineStore::in_memory();
        let outcome = run_correction_loop(
            &ex,
            &pred,
            &catalog,
            &backend,
            &store,
            3,
            &CorrectorTemplates::default(),
            Duration::from_secs(5),
        )
        .unwrap();
        assert!(outcome.resolved);
        assert_eq!(outcome.iterations_used, 0);
    }

    #[test]
    fn test_loop_backend_failure_preserves_trace() {
        let dir = tempfile::tempdir().unwrap();
        let db = fixture_db(&dir);
        let catalog = catalog_for("fix", db);
        let gold = "SELECT city FROM stations WHERE num_pumps > 1";
        let ex = example("fix", gold);
        let pred = candidate("SELECT city FROM stations");

        // Empty scripted backend: the first feedback call misses its fixture.
        let backend = ScriptedBackend::new();
        let store = GuidelineStore::in_memory();
        let outcome = run_correction_loop(
            &ex,
            &pred,
            &catalog,
            &backend,
            &store,
            3,
            &CorrectorTemplates::default(),
            Duration::from_secs(5),
        )
        .unwrap();
        assert!(!outcome.resolved);
        assert!(outcome.failure.is_some());
        assert!(!outcome.trace.is_empty());
    }

    #[test]
    fn test_loop_missing_database_is_error() {
        use crate::corpus::{CatalogEntry, DatabaseSchema};
        let mut entries = std::collections::BTreeMap::new();
        entries.insert(
            "nodb".to_string(),
            CatalogEntry {
                schema: DatabaseSchema { db_id: "nodb".into(), tables: vec![], foreign_keys: vec![] },
                db_file: None,
            },
        );
        let catalog = SchemaCatalog { entries };
        let ex = example("nodb", "SELECT 1");
        let pred = candidate("SELECT 1");
        let backend = ScriptedBackend::new();
        let store = GuidelineStore::in_memory();
        let err = run_correction_loop(
            &ex,
            &pred,
            &catalog,
            &backend,
            &store,
            3,
            &CorrectorTemplates::default(),
            Duration::from_secs(5),
        )
        .unwrap_err();
        assert!(matches!(err, CorrectorError::MissingDatabase(_)));
    }

    fn guideline(category: DiscrepancyCategory, instruction: &str) -> CorrectionGuideline {
        CorrectionGuideline {
            id: short_id(instruction),
            category,
            instruction: instruction.into(),
            origin_example_id: "ex".into(),
            created_iteration: 1,
        }
    }

    #[test]
    fn test_store_dedup_and_persistence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("guidelines.jsonl");
        let store = GuidelineStore::open(&path).unwrap();
        let added = store
            .commit(vec![
                guideline(DiscrepancyCategory::MissingJoin, "always join the link table"),
                guideline(DiscrepancyCategory::MissingJoin, "always join the link table"),
                guideline(DiscrepancyCategory::Aggregation, "check count vs sum"),
            ])
            .unwrap();
        assert_eq!(added, 2);
        assert_eq!(store.commit(vec![guideline(DiscrepancyCategory::Other, "check count vs sum")]).unwrap(), 0);

        let reloaded = GuidelineStore::open(&path).unwrap();
        assert_eq!(reloaded.len(), 2);
    }

    #[test]
    fn test_store_selection_most_recent_first_with_filter() {
        let store = GuidelineStore::in_memory();
        store
            .commit(vec![
                guideline(DiscrepancyCategory::MissingJoin, "g1"),
                guideline(DiscrepancyCategory::WrongColumn, "g2"),
                guideline(DiscrepancyCategory::MissingJoin, "g3"),
                guideline(DiscrepancyCategory::Grouping, "g4"),
                guideline(DiscrepancyCategory::WrongTable, "g5"),
            ])
            .unwrap();

        let top2 = store.select(2, None);
        assert_eq!(top2.iter().map(|g| g.instruction.as_str()).collect::<Vec<_>>(), vec!["g5", "g4"]);

        let joins = store.select(5, Some(DiscrepancyCategory::MissingJoin));
        assert_eq!(joins.iter().map(|g| g.instruction.as_str()).collect::<Vec<_>>(), vec!["g3", "g1"]);
    }

    #[test]
    fn test_apply_guidelines_at_inference() {
        use crate::sqlgen::SchemaText;
        let schema = SchemaText { db_id: "d".into(), rendered: "Table t(a:number)".into() };
        let template = "Q:{{q}} S:{{schema}}";

        let empty = GuidelineStore::in_memory();
        let prompt = apply_guidelines_at_inference("ask", &schema, template, &empty, 2, None).unwrap();
        assert_eq!(prompt, "Q:ask S:Table t(a:number)");

        let store = GuidelineStore::in_memory();
        store
            .commit(vec![
                guideline(DiscrepancyCategory::MissingJoin, "g1"),
                guideline(DiscrepancyCategory::Grouping, "g2"),
                guideline(DiscrepancyCategory::WrongTable, "g3"),
            ])
            .unwrap();
        let prompt = apply_guidelines_at_inference("ask", &schema, template, &store, 2, None).unwrap();
        assert!(prompt.contains("g3") && prompt.contains("g2"));
        assert!(!prompt.contains("g1"));

        let filtered = apply_guidelines_at_inference(
            "ask",
            &schema,
            template,
            &store,
            2,
            Some(DiscrepancyCategory::MissingJoin),
        )
        .unwrap();
        assert!(filtered.contains("g1"));
        assert!(!filtered.contains("g2") && !filtered.contains("g3"));
    }
}
