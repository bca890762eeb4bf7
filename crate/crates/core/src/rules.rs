//! Database-affinity entity rules: LLM-generated per-database rule sets,
//! boolean entity extraction for questions, question augmentation, and the
//! multi-hot entity vector fed to the router.
//!
//! All LLM output is requested inside fenced machine-readable blocks
//! (`<<<rules` / `<<<entities` ... `>>>`), parsed strictly, with one reparse
//! retry carrying a format reminder.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{estimate_tokens, LlmBackend, LlmError, LlmRequest, Message};
use crate::prompt::{render_template, TemplateError};

#[derive(Debug, Error)]
pub enum RulesError {
    #[error("llm backend: {0}")]
    Backend(#[from] LlmError),
    #[error("unparseable ruleset reply for `{db_id}` after retry; raw reply:\n{raw}")]
    UnparseableRules { db_id: String, raw: String },
    #[error("empty rule list generated for `{db_id}`")]
    EmptyRules { db_id: String },
    #[error("unparseable entity reply after retry; raw reply:\n{raw}")]
    UnparseableEntities { raw: String },
    #[error("invalid entity name `{0}`: must be lowercase snake_case")]
    InvalidEntityName(String),
    #[error("duplicate entity name `{0}` within a ruleset")]
    DuplicateEntityName(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("ruleset store i/o at `{path}`: {message}")]
    Store { path: String, message: String },
}

/// One LLM-authored predicate whose truth for a question signals affinity to
/// a database's domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRule {
    pub entity_name: String,
    pub description: String,
    pub cue_phrases: Vec<String>,
}

/// All prediction rules for one database. Rule order is the entity
/// vocabulary order for this db and is stable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    pub db_id: String,
    pub version: u32,
    pub generator: String,
    pub rules: Vec<EntityRule>,
}

impl RuleSet {
    pub fn new(
        db_id: impl Into<String>,
        rules: Vec<EntityRule>,
        generator: impl Into<String>,
        version: u32,
    ) -> Result<Self, RulesError> {
        let mut seen = BTreeSet::new();
        for rule in &rules {
            if !is_snake_case(&rule.entity_name) {
                return Err(RulesError::InvalidEntityName(rule.entity_name.clone()));
            }
            if !seen.insert(rule.entity_name.clone()) {
                return Err(RulesError::DuplicateEntityName(rule.entity_name.clone()));
            }
        }
        Ok(Self { db_id: db_id.into(), version, generator: generator.into(), rules })
    }

    pub fn entity_names(&self) -> Vec<&str> {
        self.rules.iter().map(|r| r.entity_name.as_str()).collect()
    }
}

fn is_snake_case(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase())
        && name.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

/// Boolean entity values extracted for one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityAssignment {
    pub question: String,
    pub values: BTreeMap<String, bool>,
    /// The names with value true, in rule-set order.
    pub true_entities: Vec<String>,
}

impl EntityAssignment {
    /// Assignment with every entity false (used when no extraction ran).
    pub fn all_false(question: impl Into<String>, ruleset: &RuleSet) -> Self {
        Self {
            question: question.into(),
            values: ruleset.rules.iter().map(|r| (r.entity_name.clone(), false)).collect(),
            true_entities: Vec::new(),
        }
    }
}

/// Extraction result plus any defaulting warnings (entities the reply left
/// out are set to false and noted here).
#[derive(Debug, Clone)]
pub struct ExtractionResult {
    pub assignment: EntityAssignment,
    pub warnings: Vec<String>,
}

/// The question with its true entity names appended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedQuestion {
    pub text: String,
    pub source_question: String,
    pub appended_entities: Vec<String>,
}

/// Append the true entity names to the question: the question, one space,
/// the names joined by ", ", then a closing period. No true entities leaves
/// the question unchanged.
pub fn augment_question(question: &str, assignment: &EntityAssignment) -> AugmentedQuestion {
    let text = if assignment.true_entities.is_empty() {
        question.to_string()
    } else {
        format!("{question} {}.", assignment.true_entities.join(", "))
    };
    AugmentedQuestion {
        text,
        source_question: question.to_string(),
        appended_entities: assignment.true_entities.clone(),
    }
}

/// Global ordered entity vocabulary: the union of all rule sets' entity
/// names, ordered lexicographically by (db_id, entity_name) and frozen at
/// training time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityVocabulary {
    names: Vec<String>,
}

impl EntityVocabulary {
    pub fn from_rulesets<'a>(rulesets: impl IntoIterator<Item = &'a RuleSet>) -> Self {
        let mut pairs: Vec<(&str, &str)> = Vec::new();
        for rs in rulesets {
            for rule in &rs.rules {
                pairs.push((rs.db_id.as_str(), rule.entity_name.as_str()));
            }
        }
        pairs.sort();
        let mut names = Vec::new();
        let mut seen = BTreeSet::new();
        for (_, name) in pairs {
            if seen.insert(name) {
                names.push(name.to_string());
            }
        }
        Self { names }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Multi-hot vector over the vocabulary: bit i is set iff vocabulary[i] is
/// true in the assignment. Entities outside the vocabulary are ignored.
pub fn entity_vector(assignment: &EntityAssignment, vocabulary: &EntityVocabulary) -> Vec<bool> {
    vocabulary
        .names
        .iter()
        .map(|name| assignment.values.get(name).copied().unwrap_or(false))
        .collect()
}

const FORMAT_REMINDER: &str = "\n\nReminder: reply ONLY with the fenced block in the exact format requested, nothing else.";

/// Default prompt for rule generation. `{{db_id}}`, `{{schema}}`, and
/// `{{samples}}` are filled per call.
pub const DEFAULT_RULES_TEMPLATE: &str = "\
You design routing rules that decide whether a natural-language question targets the database `{{db_id}}`.

Database schema:
{{schema}}

Sample questions for this database:
{{samples}}

Write 2-6 entity rules. Each rule names one theme of this database, describes it, and lists cue phrases.
Reply with exactly one fenced block in this format (one rule per line):
<<<rules
entity_name :: short description :: cue phrase; another cue
>>>
Entity names must be lowercase snake_case.";

/// Default prompt for entity extraction. `{{question}}` and `{{rules}}` are
/// filled per call.
pub const DEFAULT_EXTRACTION_TEMPLATE: &str = "\
Decide which of the listed entities apply to the question.

Question: {{question}}

Entities:
{{rules}}

Reply with exactly one fenced block, one line per entity, in this format:
<<<entities
entity_name: true
other_entity: false
>>>";

/// Outcome of rule generation: the parsed rule set plus the raw replies for
/// archival (one per chunk).
#[derive(Debug, Clone)]
pub struct RulesetGeneration {
    pub ruleset: RuleSet,
    pub raw_replies: Vec<String>,
    pub chunks: usize,
}

/// Generate the rule set for one database.
///
/// When the rendered prompt exceeds the backend's token budget, the
/// schema/sample block is split into chunks, one call per chunk, and the
/// per-chunk rule lists are unioned by entity name in arrival order.
pub fn generate_ruleset(
    db_id: &str,
    schema_text: &str,
    sample_questions: &[String],
    llm: &dyn LlmBackend,
    template: &str,
    version: u32,
) -> Result<RulesetGeneration, RulesError> {
    let schema_lines: Vec<&str> = schema_text.lines().filter(|l| !l.trim().is_empty()).collect();
    let chunks = plan_chunks(&schema_lines, sample_questions, template, db_id, llm.token_budget())?;
    let chunk_count = chunks.len();

    let mut union: Vec<EntityRule> = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut raw_replies = Vec::new();

    for (schema_part, samples_part) in chunks {
        let prompt = render_rules_prompt(template, db_id, &schema_part, &samples_part)?;
        let (rules, raw) = complete_and_parse(
            llm,
            "gen-rules",
            &prompt,
            parse_rules_block,
            |raw| RulesError::UnparseableRules { db_id: db_id.to_string(), raw },
        )?;
        raw_replies.push(raw);
        for rule in rules {
            if seen.insert(rule.entity_name.clone()) {
                union.push(rule);
            }
        }
    }

    if union.is_empty() {
        return Err(RulesError::EmptyRules { db_id: db_id.to_string() });
    }
    let ruleset = RuleSet::new(db_id, union, llm.id(), version)?;
    Ok(RulesetGeneration { ruleset, raw_replies, chunks: chunk_count })
}

fn render_rules_prompt(
    template: &str,
    db_id: &str,
    schema_part: &str,
    samples_part: &str,
) -> Result<String, TemplateError> {
    render_template(
        template,
        &[("db_id", db_id), ("schema", schema_part), ("samples", samples_part)],
    )
}

/// Split schema lines and sample questions into the fewest contiguous chunks
/// whose rendered prompts each fit the budget. Without a budget (or when the
/// full prompt fits) there is a single chunk.
fn plan_chunks(
    schema_lines: &[&str],
    samples: &[String],
    template: &str,
    db_id: &str,
    budget: Option<usize>,
) -> Result<Vec<(String, String)>, RulesError> {
    let full_schema = schema_lines.join("\n");
    let full_samples = render_samples(samples);
    let full_prompt = render_rules_prompt(template, db_id, &full_schema, &full_samples)?;

    let budget = match budget {
        Some(b) if estimate_tokens(&full_prompt) > b => b,
        _ => return Ok(vec![(full_schema, full_samples)]),
    };

    // One combined item list keeps schema lines and samples in order and lets
    // a chunk carry a slice of each.
    enum Item<'a> {
        Schema(&'a str),
        Sample(&'a str),
    }
    let items: Vec<Item> = schema_lines
        .iter()
        .map(|l| Item::Schema(l))
        .chain(samples.iter().map(|s| Item::Sample(s.as_str())))
        .collect();

    let mut chunks = Vec::new();
    let mut schema_acc: Vec<&str> = Vec::new();
    let mut sample_acc: Vec<&str> = Vec::new();
    let render = |schema_acc: &[&str], sample_acc: &[&str]| -> Result<String, TemplateError> {
        let samples_owned: Vec<String> = sample_acc.iter().map(|s| s.to_string()).collect();
        render_rules_prompt(template, db_id, &schema_acc.join("\n"), &render_samples(&samples_owned))
    };

    for item in &items {
        let (mut next_schema, mut next_samples) = (schema_acc.clone(), sample_acc.clone());
        match item {
            Item::Schema(l) => next_schema.push(l),
            Item::Sample(s) => next_samples.push(s),
        }
        let prompt = render(&next_schema, &next_samples)?;
        if estimate_tokens(&prompt) > budget && !(schema_acc.is_empty() && sample_acc.is_empty()) {
            let samples_owned: Vec<String> = sample_acc.iter().map(|s| s.to_string()).collect();
            chunks.push((schema_acc.join("\n"), render_samples(&samples_owned)));
            schema_acc.clear();
            sample_acc.clear();
            match item {
                Item::Schema(l) => schema_acc.push(l),
                Item::Sample(s) => sample_acc.push(s),
            }
        } else {
            schema_acc = next_schema;
            sample_acc = next_samples;
        }
    }
    if !(schema_acc.is_empty() && sample_acc.is_empty()) {
        let samples_owned: Vec<String> = sample_acc.iter().map(|s| s.to_string()).collect();
        chunks.push((schema_acc.join("\n"), render_samples(&samples_owned)));
    }
    Ok(chunks)
}

fn render_samples(samples: &[String]) -> String {
    if samples.is_empty() {
        return "(none)".to_string();
    }
    samples.iter().map(|s| format!("- {s}")).collect::<Vec<_>>().join("\n")
}

/// Issue a request, parse the reply, and on parse failure retry once with a
/// format reminder appended to the prompt.
fn complete_and_parse<T>(
    llm: &dyn LlmBackend,
    tag: &str,
    prompt: &str,
    parse: impl Fn(&str) -> Option<T>,
    unparseable: impl FnOnce(String) -> RulesError,
) -> Result<(T, String), RulesError> {
    let request = LlmRequest::new(tag, vec![Message::user(prompt.to_string())]);
    let response = llm.complete(&request)?;
    if let Some(parsed) = parse(&response.text) {
        return Ok((parsed, response.text));
    }

    let retry = LlmRequest::new(tag, vec![Message::user(format!("{prompt}{FORMAT_REMINDER}"))]);
    let response = llm.complete(&retry)?;
    match parse(&response.text) {
        Some(parsed) => Ok((parsed, response.text)),
        None => Err(unparseable(response.text)),
    }
}

/// Parse a `<<<rules ... >>>` block: one `name :: description :: cue; cue`
/// line per rule. Returns None when no block is present or a line is
/// malformed; duplicate names keep the first occurrence.
fn parse_rules_block(reply: &str) -> Option<Vec<EntityRule>> {
    let body = fenced_block(reply, "<<<rules")?;
    let mut rules: Vec<EntityRule> = Vec::new();
    let mut seen = BTreeSet::new();
    for line in body.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split("::").map(str::trim).collect();
        if parts.len() < 2 || parts[0].is_empty() {
            return None;
        }
        let name = parts[0].to_string();
        if !is_snake_case(&name) {
            return None;
        }
        let description = parts[1].to_string();
        let cue_phrases = parts
            .get(2)
            .map(|cues| cues.split(';').map(str::trim).filter(|c| !c.is_empty()).map(String::from).collect())
            .unwrap_or_default();
        if seen.insert(name.clone()) {
            rules.push(EntityRule { entity_name: name, description, cue_phrases });
        }
    }
    Some(rules)
}

/// Parse a `<<<entities ... >>>` block of `name: true|false` lines.
fn parse_entities_block(reply: &str) -> Option<BTreeMap<String, bool>> {
    let body = fenced_block(reply, "<<<entities")?;
    let mut values = BTreeMap::new();
    for line in body.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (name, value) = line.split_once(':')?;
        let name = name.trim().to_string();
        let value = match value.trim().to_ascii_lowercase().as_str() {
            "true" => true,
            "false" => false,
            _ => return None,
        };
        values.insert(name, value);
    }
    Some(values)
}

/// Extract the body between an opening fence line and the closing `>>>`.
fn fenced_block<'a>(text: &'a str, opener: &str) -> Option<&'a str> {
    let start = text.find(opener)?;
    let after = &text[start + opener.len()..];
    let body_start = after.find('\n')? + 1;
    let body = &after[body_start..];
    let end = body.find(">>>")?;
    Some(&body[..end])
}

/// Ask the backend which entities of `ruleset` hold for `question`.
///
/// The reply must cover each rule with a boolean; entities the reply omits
/// default to false with a warning. Entities in the reply that are not in
/// the ruleset are ignored.
pub fn extract_entities(
    question: &str,
    ruleset: &RuleSet,
    llm: &dyn LlmBackend,
    template: &str,
) -> Result<ExtractionResult, RulesError> {
    let rules_lines: Vec<String> = ruleset
        .rules
        .iter()
        .map(|r| {
            if r.cue_phrases.is_empty() {
                format!("- {}: {}", r.entity_name, r.description)
            } else {
                format!("- {}: {} (cues: {})", r.entity_name, r.description, r.cue_phrases.join(", "))
            }
        })
        .collect();
    let prompt = render_template(template, &[("question", question), ("rules", &rules_lines.join("\n"))])?;

    let (reply_values, _raw) = complete_and_parse(
        llm,
        "extract-entities",
        &prompt,
        parse_entities_block,
        |raw| RulesError::UnparseableEntities { raw },
    )?;

    let mut values = BTreeMap::new();
    let mut true_entities = Vec::new();
    let mut warnings = Vec::new();
    for rule in &ruleset.rules {
        let value = match reply_values.get(&rule.entity_name) {
            Some(v) => *v,
            None => {
                warnings.push(format!(
                    "entity `{}` missing from reply; defaulting to false",
                    rule.entity_name
                ));
                false
            }
        };
        values.insert(rule.entity_name.clone(), value);
        if value {
            true_entities.push(rule.entity_name.clone());
        }
    }

    Ok(ExtractionResult {
        assignment: EntityAssignment { question: question.to_string(), values, true_entities },
        warnings,
    })
}

/// On-disk rule-set store: one JSON file per db under `<dir>/<db_id>.json`.
#[derive(Debug, Clone, Default)]
pub struct RulesetStore {
    rulesets: BTreeMap<String, RuleSet>,
}

impl RulesetStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, ruleset: RuleSet) {
        self.rulesets.insert(ruleset.db_id.clone(), ruleset);
    }

    pub fn get(&self, db_id: &str) -> Option<&RuleSet> {
        self.rulesets.get(db_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &RuleSet> {
        self.rulesets.values()
    }

    pub fn len(&self) -> usize {
        self.rulesets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rulesets.is_empty()
    }

    pub fn load_dir(dir: &Path) -> Result<Self, RulesError> {
        let store_err = |message: String| RulesError::Store { path: dir.display().to_string(), message };
        let mut store = Self::new();
        let entries = std::fs::read_dir(dir).map_err(|e| store_err(e.to_string()))?;
        let mut paths: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
            .collect();
        paths.sort();
        for path in paths {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| RulesError::Store { path: path.display().to_string(), message: e.to_string() })?;
            let ruleset: RuleSet = serde_json::from_str(&text)
                .map_err(|e| RulesError::Store { path: path.display().to_string(), message: e.to_string() })?;
            store.insert(ruleset);
        }
        Ok(store)
    }

    pub fn save_dir(&self, dir: &Path) -> Result<(), RulesError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| RulesError::Store { path: dir.display().to_string(), message: e.to_string() })?;
        for (db_id, ruleset) in &self.rulesets {
            let path = dir.join(format!("{db_id}.json"));
            let json = serde_json::to_string_pretty(ruleset)
                .map_err(|e| RulesError::Store { path: path.display().to_string(), message: e.to_string() })?;
            std::fs::write(&path, json)
                .map_err(|e| RulesError::Store { path: path.display().to_string(), message: e.to_string() })?;
        }
        Ok(())
    }

    /// All rules across databases as one rule set, ordered like the global
    /// entity vocabulary. Used for extraction when the target db is unknown.
    pub fn combined_ruleset(&self) -> RuleSet {
        let mut pairs: Vec<(&String, &EntityRule)> = Vec::new();
        for rs in self.rulesets.values() {
            for rule in &rs.rules {
                pairs.push((&rs.db_id, rule));
            }
        }
        pairs.sort_by(|a, b| (a.0, &a.1.entity_name).cmp(&(b.0, &b.1.entity_name)));
        let mut seen = BTreeSet::new();
        let rules: Vec<EntityRule> = pairs
            .into_iter()
            .filter(|(_, r)| seen.insert(r.entity_name.clone()))
            .map(|(_, r)| r.clone())
            .collect();
        RuleSet { db_id: "_combined".to_string(), version: 0, generator: "store".to_string(), rules }
    }

    pub fn vocabulary(&self) -> EntityVocabulary {
        EntityVocabulary::from_rulesets(self.rulesets.values())
    }
}
