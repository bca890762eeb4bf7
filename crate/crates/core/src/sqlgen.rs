//! Schema-linked SQL generation: render the predicted database's schema,
//! build the generation prompt, extract SQL from the backend reply, and
//! compose the full question-to-SQL pipeline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SchemaCatalog;
use crate::digest::sha256_hex;
use crate::llm::{LlmBackend, LlmError, LlmRequest, Message};
use crate::prompt::{render_template, require_placeholder, TemplateError};
use crate::router::{Prediction, RouterError, RouterModel};
use crate::rules::{extract_entities, augment_question, RulesError, RulesetStore};

#[derive(Debug, Error)]
pub enum SqlGenError {
    #[error("unknown db_id `{0}` for schema linking")]
    UnknownDbId(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("llm backend: {0}")]
    Backend(#[from] LlmError),
    #[error("no SQL found in reply after retry; raw reply:\n{raw}")]
    NoSqlInReply { raw: String },
}

/// Canonical textual rendering of one database schema for prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaText {
    pub db_id: String,
    pub rendered: String,
}

/// Render the schema of `db_id` from the catalog: one `Table name(col:type,
/// ...)` line per table, a `PK:` line, then one `FK:` line per foreign key,
/// all in catalog order.
pub fn link_schema(catalog: &SchemaCatalog, db_id: &str) -> Result<SchemaText, SqlGenError> {
    let entry = catalog.get(db_id).ok_or_else(|| SqlGenError::UnknownDbId(db_id.to_string()))?;
    let schema = &entry.schema;

    let mut lines = Vec::new();
    for table in &schema.tables {
        let cols: Vec<String> =
            table.columns.iter().map(|c| format!("{}:{}", c.name, c.col_type)).collect();
        lines.push(format!("Table {}({})", table.name, cols.join(", ")));
    }
    let pks: Vec<String> = schema
        .tables
        .iter()
        .flat_map(|t| t.primary_keys.iter().map(move |pk| format!("{}.{pk}", t.name)))
        .collect();
    if !pks.is_empty() {
        lines.push(format!("PK: {}", pks.join(", ")));
    }
    for (from, to) in &schema.foreign_keys {
        lines.push(format!("FK: {}.{} -> {}.{}", from.table, from.column, to.table, to.column));
    }

    Ok(SchemaText { db_id: db_id.to_string(), rendered: lines.join("\n") })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    Generated,
    Corrected,
}

/// Generated SQL with its provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqlCandidate {
    pub sql: String,
    pub db_id: String,
    pub source: CandidateSource,
    /// 0 for freshly generated SQL, incremented per correction round.
    pub iteration: u32,
    pub prompt_digest: String,
    pub backend_id: String,
}

impl SqlCandidate {
    pub fn generated(sql: String, db_id: &str, prompt_digest: String, backend_id: String) -> Self {
        Self {
            sql,
            db_id: db_id.to_string(),
            source: CandidateSource::Generated,
            iteration: 0,
            prompt_digest,
            backend_id,
        }
    }

    pub fn corrected(sql: String, previous: &SqlCandidate, prompt_digest: String, backend_id: String) -> Self {
        Self {
            sql,
            db_id: previous.db_id.clone(),
            source: CandidateSource::Corrected,
            iteration: previous.iteration + 1,
            prompt_digest,
            backend_id,
        }
    }
}

/// Default SQL-generation prompt; `{{question}}` and `{{schema}}` are
/// required placeholders.
pub const DEFAULT_SQL_TEMPLATE: &str = "\
Translate the question into a single SQLite query for the schema below.

Schema:
{{schema}}

Question: {{question}}

Reply with the SQL inside a fenced block:
```sql
SELECT ...
```";

/// Substitute the question and schema into the template. Guidelines, when
/// present, are appended verbatim in store order under a dedicated section.
pub fn build_prompt(
    q_augmented: &str,
    schema_text: &SchemaText,
    template: &str,
    guidelines: &[String],
) -> Result<String, SqlGenError> {
    require_placeholder(template, &["question", "q"])?;
    require_placeholder(template, &["schema"])?;
    let mut prompt = render_template(
        template,
        &[
            ("question", q_augmented),
            ("q", q_augmented),
            ("schema", &schema_text.rendered),
        ],
    )?;
    if !guidelines.is_empty() {
        prompt.push_str("\n\nCorrection guidelines:\n");
        for g in guidelines {
            prompt.push_str("- ");
            prompt.push_str(g);
            prompt.push('\n');
        }
    }
    Ok(prompt)
}

/// Pull SQL out of a backend reply: a fenced code block containing a
/// SELECT/WITH statement wins; otherwise the longest inline statement
/// starting at a SELECT or WITH keyword.
pub fn extract_sql(reply: &str) -> Option<String> {
    // Fenced block, ```sql or bare ```.
    let mut search = reply;
    while let Some(start) = search.find("```") {
        let after = &search[start + 3..];
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
        let lang = &after[..body_start];
        let body = &after[body_start..];
        if let Some(end) = body.find("```") {
            let content = body[..end].trim();
            if !lang.trim().is_empty() && !lang.trim().eq_ignore_ascii_case("sql") {
                search = &body[end + 3..];
                continue;
            }
            if starts_with_statement(content) {
                return Some(content.to_string());
            }
            // A fenced block not starting with SELECT/WITH may still hold a
            // statement further in.
            if let Some(inline) = longest_inline_statement(content) {
                return Some(inline);
            }
            search = &body[end + 3..];
        } else {
            break;
        }
    }
    longest_inline_statement(reply)
}

fn starts_with_statement(text: &str) -> bool {
    let lower = text.trim_start().to_lowercase();
    lower.starts_with("select") || lower.starts_with("with")
}

fn longest_inline_statement(text: &str) -> Option<String> {
    let lower = text.to_lowercase();
    let mut best: Option<String> = None;
    for kw in ["select", "with"] {
        let mut offset = 0;
        while let Some(found) = lower[offset..].find(kw) {
            let start = offset + found;
            // Word boundary on both sides.
            let before_ok = start == 0
                || !lower.as_bytes()[start - 1].is_ascii_alphanumeric()
                    && lower.as_bytes()[start - 1] != b'_';
            let after = start + kw.len();
            let after_ok = after >= lower.len()
                || !lower.as_bytes()[after].is_ascii_alphanumeric() && lower.as_bytes()[after] != b'_';
            if before_ok && after_ok {
                let end = text[start..].find(';').map(|i| start + i).unwrap_or(text.len());
                let candidate = text[start..end].trim().to_string();
                if !candidate.is_empty()
                    && best.as_ref().map_or(true, |b| candidate.len() > b.len())
                {
                    best = Some(candidate);
                }
            }
            offset = start + kw.len();
        }
    }
    best
}

const SQL_FORMAT_REMINDER: &str =
    "\n\nReminder: reply with a single SQL statement inside a ```sql fenced block.";

/// Obtain a SQL candidate from the backend, with one format-reminder retry
/// when no SQL can be extracted from the reply.
pub fn generate_sql(llm: &dyn LlmBackend, prompt: &str, db_id: &str) -> Result<SqlCandidate, SqlGenError> {
    let request = LlmRequest::new("generate-sql", vec![Message::user(prompt.to_string())]);
    let response = llm.complete(&request)?;
    if let Some(sql) = extract_sql(&response.text) {
        return Ok(SqlCandidate::generated(sql, db_id, sha256_hex(prompt), response.backend_id));
    }

    let retry_prompt = format!("{prompt}{SQL_FORMAT_REMINDER}");
    let retry = LlmRequest::new("generate-sql", vec![Message::user(retry_prompt.clone())]);
    let response = llm.complete(&retry)?;
    match extract_sql(&response.text) {
        Some(sql) => Ok(SqlCandidate::generated(sql, db_id, sha256_hex(&retry_prompt), response.backend_id)),
        None => Err(SqlGenError::NoSqlInReply { raw: response.text }),
    }
}

/// Pipeline stage names, used to tag errors and traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineStage {
    ExtractEntities,
    AugmentQuestion,
    Featurize,
    Predict,
    LinkSchema,
    BuildPrompt,
    GenerateSql,
}

#[derive(Debug, Error)]
#[error("pipeline stage {stage:?} failed: {message}")]
pub struct PipelineError {
    pub stage: PipelineStage,
    pub message: String,
}

impl PipelineError {
    fn new(stage: PipelineStage, err: impl std::fmt::Display) -> Self {
        Self { stage, message: err.to_string() }
    }
}

/// Per-call record of every stage's output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub question: String,
    pub true_entities: Vec<String>,
    pub augmented: String,
    /// Ranked router output (top `ranked_k`), best first.
    pub ranked: Vec<Prediction>,
    pub predicted_db_id: String,
    pub schema_digest: String,
    pub prompt_digest: String,
    pub sql: String,
    pub warnings: Vec<String>,
}

/// Settings for the composed pipeline.
pub struct PipelineConfig<'a> {
    pub sql_template: &'a str,
    pub extraction_template: &'a str,
    /// Correction guidelines to append to the generation prompt.
    pub guidelines: &'a [String],
    /// How many ranked classes to keep in the trace (top-1 drives schema
    /// linking regardless).
    pub ranked_k: usize,
}

impl<'a> PipelineConfig<'a> {
    pub fn new(sql_template: &'a str, extraction_template: &'a str) -> Self {
        Self { sql_template, extraction_template, guidelines: &[], ranked_k: 5 }
    }
}

/// The full question-to-SQL composition: extract entities over the combined
/// rule store, augment the question, rank db_ids, link the top-1 schema,
/// build the prompt, and generate SQL. Equivalent to calling the stages by
/// hand; the first failing stage aborts with a stage-tagged error.
pub fn pipeline_generate(
    question: &str,
    ruleset_store: &RulesetStore,
    router_model: &RouterModel,
    catalog: &SchemaCatalog,
    llm: &dyn LlmBackend,
    config: &PipelineConfig,
) -> Result<(SqlCandidate, PipelineTrace), PipelineError> {
    let combined = ruleset_store.combined_ruleset();
    let extraction = extract_entities(question, &combined, llm, config.extraction_template)
        .map_err(|e: RulesError| PipelineError::new(PipelineStage::ExtractEntities, e))?;

    let augmented = augment_question(question, &extraction.assignment);

    let fv = crate::router::featurize(
        &augmented.text,
        &extraction.assignment,
        &router_model.feature_config,
        &router_model.entity_vocabulary,
    );

    let ranked = crate::router::predict_topk(router_model, &fv, config.ranked_k.max(1))
        .map_err(|e: RouterError| PipelineError::new(PipelineStage::Predict, e))?;
    let predicted_db_id = ranked
        .first()
        .map(|p| p.class.clone())
        .ok_or_else(|| PipelineError::new(PipelineStage::Predict, "empty ranking"))?;

    let schema_text = link_schema(catalog, &predicted_db_id)
        .map_err(|e| PipelineError::new(PipelineStage::LinkSchema, e))?;

    let prompt = build_prompt(&augmented.text, &schema_text, config.sql_template, config.guidelines)
        .map_err(|e| PipelineError::new(PipelineStage::BuildPrompt, e))?;

    let candidate = generate_sql(llm, &prompt, &predicted_db_id)
        .map_err(|e| PipelineError::new(PipelineStage::GenerateSql, e))?;

    let trace = PipelineTrace {
        question: question.to_string(),
        true_entities: extraction.assignment.true_entities.clone(),
        augmented: augmented.text.clone(),
        ranked,
        predicted_db_id,
        schema_digest: sha256_hex(&schema_text.rendered),
        prompt_digest: candidate.prompt_digest.clone(),
        sql: candidate.sql.clone(),
        warnings: extraction.warnings,
    };
    Ok((candidate, trace))
}
