//! Dataset ingestion and preparation: Spider-format loading, schema catalog
//! construction, stratified re-splitting, class merging, and validity
//! filtering.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read `{path}`: {source}")]
    Unreadable {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed dataset file `{path}`: {message}")]
    MalformedFile { path: String, message: String },
    #[error("malformed record at index {index} in `{path}`: {message}")]
    MalformedRecord { path: String, index: usize, message: String },
    #[error("catalog error for db `{db_id}`: {message}")]
    Catalog { db_id: String, message: String },
    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),
    #[error("cannot split an empty example list")]
    EmptySplitInput,
    #[error("merge conflict: label `{label}` is claimed by rule `{first}` and rule `{second}`")]
    MergeConflict { label: String, first: String, second: String },
    #[error("chained merge: `{from}` maps to `{via}`, which is itself remapped to `{target}`")]
    ChainedMerge { from: String, via: String, target: String },
    #[error("invalid similarity threshold {0}: must be in (0, 1)")]
    InvalidThreshold(f64),
}

/// Difficulty tag supplied by an external classifier; not derived here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
    Extra,
}

impl Difficulty {
    pub fn as_str(&self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
            Difficulty::Extra => "extra",
        }
    }
}

/// One dataset record: a natural-language question, its target database, and
/// the reference SQL. Serialized in the Spider dataset layout (`query` holds
/// the SQL).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub question: String,
    pub db_id: String,
    #[serde(rename = "query")]
    pub gold_sql: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty_tag: Option<Difficulty>,
}

impl Example {
    fn check(&self) -> Result<(), String> {
        if self.question.trim().is_empty() {
            return Err("empty question".into());
        }
        if self.db_id.trim().is_empty() {
            return Err("empty db_id".into());
        }
        if self.gold_sql.trim().is_empty() {
            return Err("empty query".into());
        }
        Ok(())
    }
}

/// Load one or more Spider-layout dataset files and concatenate them in file
/// order. Duplicate (question, db_id) pairs are kept.
pub fn load_dataset(paths: &[PathBuf]) -> Result<Vec<Example>, CorpusError> {
    let mut examples = Vec::new();
    for path in paths {
        let display = path.display().to_string();
        let text = std::fs::read_to_string(path)
            .map_err(|source| CorpusError::Unreadable { path: display.clone(), source })?;
        let raw: Vec<serde_json::Value> = serde_json::from_str(&text)
            .map_err(|e| CorpusError::MalformedFile { path: display.clone(), message: e.to_string() })?;
        for (index, value) in raw.into_iter().enumerate() {
            let example: Example = serde_json::from_value(value).map_err(|e| {
                CorpusError::MalformedRecord { path: display.clone(), index, message: e.to_string() }
            })?;
            example.check().map_err(|message| CorpusError::MalformedRecord {
                path: display.clone(),
                index,
                message,
            })?;
            examples.push(example);
        }
    }
    Ok(examples)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub col_type: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSchema {
    pub name: String,
    pub columns: Vec<ColumnSchema>,
    /// Primary-key column names, in catalog order.
    pub primary_keys: Vec<String>,
}

/// A fully qualified column reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnRef {
    pub table: String,
    pub column: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatabaseSchema {
    pub db_id: String,
    pub tables: Vec<TableSchema>,
    pub foreign_keys: Vec<(ColumnRef, ColumnRef)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub schema: DatabaseSchema,
    /// Path to the executable database file, when one exists on disk.
    pub db_file: Option<PathBuf>,
}

/// All known databases, keyed by db_id.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SchemaCatalog {
    pub entries: BTreeMap<String, CatalogEntry>,
}

impl SchemaCatalog {
    pub fn get(&self, db_id: &str) -> Option<&CatalogEntry> {
        self.entries.get(db_id)
    }

    pub fn db_file(&self, db_id: &str) -> Option<&Path> {
        self.entries.get(db_id).and_then(|e| e.db_file.as_deref())
    }

    pub fn db_ids(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Deserialize)]
struct RawSpiderSchema {
    db_id: String,
    table_names_original: Vec<String>,
    /// Pairs of [table_index, column_name]; table_index −1 is the `*` pseudo
    /// column at global index 0.
    column_names_original: Vec<(i64, String)>,
    #[serde(default)]
    column_types: Vec<String>,
    #[serde(default)]
    primary_keys: Vec<serde_json::Value>,
    #[serde(default)]
    foreign_keys: Vec<(i64, i64)>,
}

/// Load a Spider `tables.json` catalog. For each db, the executable database
/// file is looked up at `<db_root>/<db_id>/<db_id>.sqlite`; a missing file
/// leaves the entry present with no path.
pub fn load_schema_catalog(tables_file: &Path, db_root: Option<&Path>) -> Result<SchemaCatalog, CorpusError> {
    let display = tables_file.display().to_string();
    let text = std::fs::read_to_string(tables_file)
        .map_err(|source| CorpusError::Unreadable { path: display.clone(), source })?;
    let raw: Vec<RawSpiderSchema> = serde_json::from_str(&text)
        .map_err(|e| CorpusError::MalformedFile { path: display, message: e.to_string() })?;

    let mut entries = BTreeMap::new();
    for db in raw {
        let schema = convert_schema(db)?;
        let db_file = db_root.and_then(|root| {
            let candidate = root.join(&schema.db_id).join(format!("{}.sqlite", schema.db_id));
            candidate.exists().then_some(candidate)
        });
        entries.insert(schema.db_id.clone(), CatalogEntry { schema, db_file });
    }
    Ok(SchemaCatalog { entries })
}

fn convert_schema(raw: RawSpiderSchema) -> Result<DatabaseSchema, CorpusError> {
    let db_id = raw.db_id.clone();
    let catalog_err = |message: String| CorpusError::Catalog { db_id: db_id.clone(), message };

    let mut seen_tables = HashSet::new();
    for name in &raw.table_names_original {
        if !seen_tables.insert(name.to_lowercase()) {
            return Err(catalog_err(format!("duplicate table name `{name}`")));
        }
    }

    let mut tables: Vec<TableSchema> = raw
        .table_names_original
        .iter()
        .map(|name| TableSchema { name: name.clone(), columns: Vec::new(), primary_keys: Vec::new() })
        .collect();

    // Global column index -> (table index, column name). Index 0 is the `*`
    // pseudo column (table index −1) and resolves to None.
    let mut global_columns: Vec<Option<(usize, String)>> = Vec::with_capacity(raw.column_names_original.len());
    for (i, (table_idx, col_name)) in raw.column_names_original.iter().enumerate() {
        if *table_idx < 0 {
            global_columns.push(None);
            continue;
        }
        let table_idx = *table_idx as usize;
        let table = tables
            .get_mut(table_idx)
            .ok_or_else(|| CorpusError::Catalog {
                db_id: raw.db_id.clone(),
                message: format!("column `{col_name}` references table index {table_idx} out of range"),
            })?;
        if table.columns.iter().any(|c| c.name.eq_ignore_ascii_case(col_name)) {
            return Err(CorpusError::Catalog {
                db_id: raw.db_id.clone(),
                message: format!("duplicate column `{col_name}` in table `{}`", table.name),
            });
        }
        let col_type = raw.column_types.get(i).cloned().unwrap_or_else(|| "text".to_string());
        table.columns.push(ColumnSchema { name: col_name.clone(), col_type });
        global_columns.push(Some((table_idx, col_name.clone())));
    }

    let table_names: Vec<String> = tables.iter().map(|t| t.name.clone()).collect();
    let resolve = |index: i64, what: &str| -> Result<ColumnRef, CorpusError> {
        let slot = usize::try_from(index)
            .ok()
            .and_then(|i| global_columns.get(i))
            .ok_or_else(|| catalog_err(format!("{what} column index {index} out of range")))?;
        let (table_idx, column) = slot
            .as_ref()
            .ok_or_else(|| catalog_err(format!("{what} references the `*` pseudo column")))?;
        Ok(ColumnRef { table: table_names[*table_idx].clone(), column: column.clone() })
    };

    for pk in &raw.primary_keys {
        // Spider encodes primary keys as column indices; some variants use
        // nested lists for composite keys.
        let indices: Vec<i64> = match pk {
            serde_json::Value::Number(n) => vec![n.as_i64().unwrap_or(-1)],
            serde_json::Value::Array(items) => items.iter().filter_map(|v| v.as_i64()).collect(),
            _ => return Err(catalog_err(format!("unsupported primary key encoding: {pk}"))),
        };
        for index in indices {
            let col = resolve(index, "primary key")?;
            let table = tables
                .iter_mut()
                .find(|t| t.name == col.table)
                .expect("resolve returned an existing table");
            table.primary_keys.push(col.column);
        }
    }

    let mut foreign_keys = Vec::new();
    for (from, to) in &raw.foreign_keys {
        foreign_keys.push((resolve(*from, "foreign key")?, resolve(*to, "foreign key")?));
    }

    Ok(DatabaseSchema { db_id, tables, foreign_keys })
}

/// Split fractions for train/validation/test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self, CorpusError> {
        let ratios = Self { train, validation, test };
        ratios.check()?;
        Ok(ratios)
    }

    fn check(&self) -> Result<(), CorpusError> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|r| *r <= 0.0) {
            return Err(CorpusError::InvalidRatios("all ratios must be positive".into()));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidRatios(format!("ratios sum to {sum}, expected 1")));
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.validation, self.test]
    }
}

/// A stratified train/validation/test split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    pub seed: u64,
    pub ratios: SplitRatios,
}

impl SplitDataset {
    pub fn total(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }
}

/// Stratified re-split by class (db_id), deterministic for a fixed seed.
///
/// Per class, split sizes come from the largest-remainder method (ties broken
/// in train/validation/test order). Classes with fewer than 3 examples go
/// entirely to train; every class with at least 3 examples is guaranteed a
/// member in all three splits, which for very small classes takes precedence
/// over the rounding bound.
pub fn resplit(examples: &[Example], ratios: SplitRatios, seed: u64) -> Result<SplitDataset, CorpusError> {
    ratios.check()?;
    if examples.is_empty() {
        return Err(CorpusError::EmptySplitInput);
    }

    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        by_class.entry(&ex.db_id).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits: [Vec<Example>; 3] = [Vec::new(), Vec::new(), Vec::new()];

    for indices in by_class.values() {
        let mut pool = indices.clone();
        pool.shuffle(&mut rng);
        let n = pool.len();

        if n < 3 {
            splits[0].extend(pool.iter().map(|&i| examples[i].clone()));
            continue;
        }

        let counts = stratified_counts(n, ratios.as_array());
        let mut cursor = 0;
        for (split_idx, &count) in counts.iter().enumerate() {
            for &i in &pool[cursor..cursor + count] {
                splits[split_idx].push(examples[i].clone());
            }
            cursor += count;
        }
    }

    let [train, validation, test] = splits;
    Ok(SplitDataset { train, validation, test, seed, ratios })
}

/// Largest-remainder apportionment of `n` items over three ratios, then a
/// presence adjustment: every split receives at least one item (callers only
/// invoke this for n >= 3).
fn stratified_counts(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut remaining = n - assigned;

    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in &order {
        if remaining == 0 {
            break;
        }
        counts[i] += 1;
        remaining -= 1;
    }

    // Presence adjustment: move one item from the fullest split into any
    // empty one.
    for empty in 0..3 {
        if counts[empty] == 0 {
            let donor = (0..3).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).unwrap();
            debug_assert!(counts[donor] > 1);
            counts[donor] -= 1;
            counts[empty] += 1;
        }
    }

    [counts[0], counts[1], counts[2]]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeProvenance {
    RuleBased,
    SimilarityBased,
    Manual,
}

/// Mapping from original class labels to merged labels. Total over its input
/// label set; identity for labels outside it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelMap {
    pub mapping: BTreeMap<String, String>,
    pub provenance: BTreeMap<String, MergeProvenance>,
}

impl LabelMap {
    pub fn identity(labels: &[String], provenance: MergeProvenance) -> Self {
        let mapping = labels.iter().map(|l| (l.clone(), l.clone())).collect();
        let prov = labels.iter().map(|l| (l.clone(), provenance)).collect();
        Self { mapping, provenance: prov }
    }

    pub fn apply(&self, label: &str) -> String {
        self.mapping.get(label).cloned().unwrap_or_else(|| label.to_string())
    }

    /// Rewrite every example's db_id through the map.
    pub fn apply_to_examples(&self, examples: &[Example]) -> Vec<Example> {
        examples
            .iter()
            .map(|ex| {
                let mut ex = ex.clone();
                ex.db_id = self.apply(&ex.db_id);
                ex
            })
            .collect()
    }

    pub fn is_idempotent(&self) -> bool {
        self.mapping.values().all(|target| self.apply(target) == *target)
    }

    /// Number of labels that actually change under the map.
    pub fn merged_count(&self) -> usize {
        self.mapping.iter().filter(|(k, v)| k != v).count()
    }
}

/// A class-merging rule: either an explicit member list or a glob pattern
/// (`*` matches any run of characters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MergeRule {
    Explicit { members: Vec<String>, new_label: String },
    Pattern { pattern: String, new_label: String },
}

impl MergeRule {
    pub fn new_label(&self) -> &str {
        match self {
            MergeRule::Explicit { new_label, .. } | MergeRule::Pattern { new_label, .. } => new_label,
        }
    }

    fn matches(&self, label: &str) -> bool {
        match self {
            MergeRule::Explicit { members, .. } => members.iter().any(|m| m == label),
            MergeRule::Pattern { pattern, .. } => glob_match(pattern, label),
        }
    }

    fn describe(&self) -> String {
        match self {
            MergeRule::Explicit { members, new_label } => {
                format!("[{}] -> {new_label}", members.join(", "))
            }
            MergeRule::Pattern { pattern, new_label } => format!("{pattern} -> {new_label}"),
        }
    }
}

/// Minimal glob: `*` matches any (possibly empty) character run; everything
/// else is literal.
fn glob_match(pattern: &str, text: &str) -> bool {
    fn inner(p: &[char], t: &[char]) -> bool {
        match p.split_first() {
            None => t.is_empty(),
            Some(('*', rest)) => (0..=t.len()).any(|skip| inner(rest, &t[skip..])),
            Some((c, rest)) => t.split_first().is_some_and(|(tc, tr)| tc == c && inner(rest, tr)),
        }
    }
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    inner(&p, &t)
}

/// Build a label map from merge rules. Labels matched by no rule map to
/// themselves; a label matched by two different rules is a conflict.
pub fn merge_classes_rule_based(labels: &[String], rules: &[MergeRule]) -> Result<LabelMap, CorpusError> {
    let unique: BTreeSet<&String> = labels.iter().collect();
    let mut mapping = BTreeMap::new();
    let mut provenance = BTreeMap::new();

    for label in &unique {
        let matched: Vec<&MergeRule> = rules.iter().filter(|r| r.matches(label)).collect();
        match matched.as_slice() {
            [] => {
                mapping.insert((*label).clone(), (*label).clone());
            }
            [rule] => {
                mapping.insert((*label).clone(), rule.new_label().to_string());
            }
            [first, second, ..] => {
                // Two rules with the same target are not a real conflict.
                if matched.iter().all(|r| r.new_label() == first.new_label()) {
                    mapping.insert((*label).clone(), first.new_label().to_string());
                } else {
                    return Err(CorpusError::MergeConflict {
                        label: (*label).clone(),
                        first: first.describe(),
                        second: matched
                            .iter()
                            .find(|r| r.new_label() != first.new_label())
                            .unwrap_or(second)
                            .describe(),
                    });
                }
            }
        }
        provenance.insert((*label).clone(), MergeProvenance::RuleBased);
    }

    check_idempotent(&mapping)?;
    Ok(LabelMap { mapping, provenance })
}

fn check_idempotent(mapping: &BTreeMap<String, String>) -> Result<(), CorpusError> {
    for (from, via) in mapping {
        if let Some(target) = mapping.get(via) {
            if target != via {
                return Err(CorpusError::ChainedMerge {
                    from: from.clone(),
                    via: via.clone(),
                    target: target.clone(),
                });
            }
        }
    }
    Ok(())
}

/// Cosine similarity between character-trigram count vectors of two strings.
/// Strings shorter than three characters contribute a single n-gram (the
/// whole string).
pub fn trigram_cosine(a: &str, b: &str) -> f64 {
    let counts = |s: &str| -> BTreeMap<String, f64> {
        let chars: Vec<char> = s.chars().collect();
        let mut map = BTreeMap::new();
        if chars.len() < 3 {
            *map.entry(s.to_string()).or_insert(0.0) += 1.0;
        } else {
            for w in chars.windows(3) {
                *map.entry(w.iter().collect::<String>()).or_insert(0.0) += 1.0;
            }
        }
        map
    };
    let ca = counts(a);
    let cb = counts(b);
    let dot: f64 = ca.iter().filter_map(|(k, v)| cb.get(k).map(|w| v * w)).sum();
    let na: f64 = ca.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = cb.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Merge labels by single-link clustering over a pairwise similarity
/// function. Each cluster maps to its sorted member names joined by `_`,
/// unless an override supplies an explicit name for exactly that member set.
/// Output is independent of the input label ordering.
pub fn merge_classes_similarity<F>(
    labels: &[String],
    similarity_fn: F,
    threshold: f64,
    overrides: &[(Vec<String>, String)],
) -> Result<LabelMap, CorpusError>
where
    F: Fn(&str, &str) -> f64,
{
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(CorpusError::InvalidThreshold(threshold));
    }

    let unique: Vec<String> = {
        let set: BTreeSet<&String> = labels.iter().collect();
        set.into_iter().cloned().collect()
    };

    // Union-find single-link clustering.
    let mut parent: Vec<usize> = (0..unique.len()).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let root = find(parent, parent[i]);
            parent[i] = root;
        }
        parent[i]
    }
    for i in 0..unique.len() {
        for j in (i + 1)..unique.len() {
            if similarity_fn(&unique[i], &unique[j]) >= threshold {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }

    let mut clusters: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for i in 0..unique.len() {
        let root = find(&mut parent, i);
        clusters.entry(root).or_default().push(unique[i].clone());
    }

    let mut mapping = BTreeMap::new();
    let mut provenance = BTreeMap::new();
    for members in clusters.values() {
        let name = if members.len() == 1 {
            members[0].clone()
        } else {
            let member_set: BTreeSet<&String> = members.iter().collect();
            overrides
                .iter()
                .find(|(set, _)| {
                    set.len() == member_set.len() && set.iter().all(|m| member_set.contains(m))
                })
                .map(|(_, name)| name.clone())
                .unwrap_or_else(|| {
                    let mut sorted = members.clone();
                    sorted.sort();
                    sorted.join("_")
                })
        };
        for m in members {
            mapping.insert(m.clone(), name.clone());
            provenance.insert(m.clone(), MergeProvenance::SimilarityBased);
        }
    }

    check_idempotent(&mapping)?;
    Ok(LabelMap { mapping, provenance })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    MissingSchema,
    MissingDbFile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DropRecord {
    pub index: usize,
    pub db_id: String,
    pub reason: DropReason,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DropReport {
    pub records: Vec<DropRecord>,
}

impl DropReport {
    pub fn count(&self, reason: DropReason) -> usize {
        self.records.iter().filter(|r| r.reason == reason).count()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Drop examples whose db_id has no catalog entry, and — when execution is
/// required — examples whose catalog entry has no database file.
pub fn filter_invalid(
    examples: &[Example],
    catalog: &SchemaCatalog,
    require_db_file: bool,
) -> (Vec<Example>, DropReport) {
    let mut kept = Vec::new();
    let mut report = DropReport::default();
    for (index, ex) in examples.iter().enumerate() {
        match catalog.get(&ex.db_id) {
            None => report.records.push(DropRecord {
                index,
                db_id: ex.db_id.clone(),
                reason: DropReason::MissingSchema,
            }),
            Some(entry) if require_db_file && entry.db_file.is_none() => {
                report.records.push(DropRecord {
                    index,
                    db_id: ex.db_id.clone(),
                    reason: DropReason::MissingDbFile,
                })
            }
            Some(_) => kept.push(ex.clone()),
        }
    }
    (kept, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn example(question: &str, db_id: &str, sql: &str) -> Example {
        Example {
            question: question.to_string(),
            db_id: db_id.to_string(),
            gold_sql: sql.to_string(),
            difficulty_tag: None,
        }
    }

    fn write_json(dir: &tempfile::TempDir, name: &str, content: &str) -> PathBuf {
        let path = dir.path().join(name);
        std::fs::write(&path, content).unwrap();
        path
    }

    #[test]
    fn test_load_dataset_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_json(
            &dir,
            "d.json",
            r#"[{"question":"q1","db_id":"a","query":"SELECT 1"},
                {"question":"q2","db_id":"b","query":"SELECT 2"}]"#,
        );
        let examples = load_dataset(&[path]).unwrap();
        assert_eq!(examples.len(), 2);
        assert_eq!(examples[0].question, "q1");
        assert_eq!(examples[1].gold_sql, "SELECT 2");
    }

    #[test]
    fn test_load_dataset_concatenates_in_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_json(&dir, "a.json", r#"[{"question":"q1","db_id":"a","query":"S"}]"#);
        let b = write_json(
            &dir,
            "b.json",
            r#"[{"question":"q2","db_id":"a","query":"S"},{"question":"q3","db_id":"a","query":"S"}]"#,
        );
        let examples = load_dataset(&[a, b]).unwrap();
        assert_eq!(examples.len(), 3);
        assert_eq!(examples[0].question, "q1");
        assert_eq!(examples[2].question, "q3");
    }

    #[test]
    fn test_load_dataset_missing_db_id_names_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_json(
            &dir,
            "d.json",
            r#"[{"question":"q1","db_id":"a","query":"S"},{"question":"q2","query":"S"}]"#,
        );
        let err = load_dataset(&[path]).unwrap_err();
        match err {
            CorpusError::MalformedRecord { index, .. } => assert_eq!(index, 1),
            other => panic!("expected malformed record, got {other}"),
        }
    }

    #[test]
    fn test_load_dataset_unreadable_file() {
        let err = load_dataset(&[PathBuf::from("/nonexistent/nope.json")]).unwrap_err();
        assert!(matches!(err, CorpusError::Unreadable { .. }));
    }

    const TABLES_JSON: &str = r#"[{
        "db_id": "gas",
        "table_names_original": ["company", "station"],
        "column_names_original": [[-1, "*"], [0, "id"], [0, "name"], [1, "id"], [1, "company_id"]],
        "column_types": ["text", "number", "text", "number", "number"],
        "primary_keys": [1, 3],
        "foreign_keys": [[4, 1]]
    }]"#;

    #[test]
    fn test_load_schema_catalog_direct_read() {
        let dir = tempfile::tempdir().unwrap();
        let tables = write_json(&dir, "tables.json", TABLES_JSON);
        let catalog = load_schema_catalog(&tables, None).unwrap();
        let entry = catalog.get("gas").unwrap();
        assert_eq!(entry.schema.tables.len(), 2);
        assert_eq!(entry.schema.foreign_keys.len(), 1);
        let (from, to) = &entry.schema.foreign_keys[0];
        assert_eq!(from.table, "station");
        assert_eq!(from.column, "company_id");
        assert_eq!(to.table, "company");
        assert_eq!(to.column, "id");
        assert_eq!(entry.schema.tables[0].primary_keys, vec!["id".to_string()]);
    }

    #[test]
    fn test_load_schema_catalog_missing_db_file() {
        let dir = tempfile::tempdir().unwrap();
        let tables = write_json(&dir, "tables.json", TABLES_JSON);
        let db_root = dir.path().join("db");
        std::fs::create_dir_all(db_root.join("gas")).unwrap();
        let catalog = load_schema_catalog(&tables, Some(&db_root)).unwrap();
        assert!(catalog.get("gas").unwrap().db_file.is_none());

        std::fs::write(db_root.join("gas").join("gas.sqlite"), b"stub").unwrap();
        let catalog = load_schema_catalog(&tables, Some(&db_root)).unwrap();
        assert!(catalog.get("gas").unwrap().db_file.is_some());
    }

    #[test]
    fn test_load_schema_catalog_fk_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let bad = TABLES_JSON.replace("[[4, 1]]", "[[99, 1]]");
        let tables = write_json(&dir, "tables.json", &bad);
        let err = load_schema_catalog(&tables, None).unwrap_err();
        match err {
            CorpusError::Catalog { db_id, message } => {
                assert_eq!(db_id, "gas");
                assert!(message.contains("99"));
            }
            other => panic!("expected catalog error, got {other}"),
        }
    }

    fn uniform_examples(class: &str, n: usize) -> Vec<Example> {
        (0..n).map(|i| example(&format!("q{i}"), class, "SELECT 1")).collect()
    }

    #[test]
    fn test_resplit_single_class_ratio_arithmetic() {
        let examples = uniform_examples("a", 100);
        let ratios = SplitRatios::new(0.7, 0.15, 0.15).unwrap();
        let split = resplit(&examples, ratios, 7).unwrap();
        assert_eq!(split.train.len(), 70);
        assert_eq!(split.validation.len(), 15);
        assert_eq!(split.test.len(), 15);
    }

    #[test]
    fn test_resplit_deterministic_for_seed() {
        let mut examples = uniform_examples("a", 40);
        examples.extend(uniform_examples("b", 25));
        let ratios = SplitRatios::new(0.7, 0.15, 0.15).unwrap();
        let s1 = resplit(&examples, ratios, 7).unwrap();
        let s2 = resplit(&examples, ratios, 7).unwrap();
        assert_eq!(s1.train, s2.train);
        assert_eq!(s1.validation, s2.validation);
        assert_eq!(s1.test, s2.test);

        let s3 = resplit(&examples, ratios, 8).unwrap();
        assert!(s1.train != s3.train || s1.validation != s3.validation || s1.test != s3.test);
    }

    #[test]
    fn test_resplit_small_class_goes_to_train() {
        let mut examples = uniform_examples("big", 20);
        examples.push(example("t1", "tiny", "SELECT 1"));
        examples.push(example("t2", "tiny", "SELECT 1"));
        let ratios = SplitRatios::new(0.7, 0.15, 0.15).unwrap();
        let split = resplit(&examples, ratios, 3).unwrap();
        assert_eq!(split.train.iter().filter(|e| e.db_id == "tiny").count(), 2);
        assert_eq!(split.validation.iter().filter(|e| e.db_id == "tiny").count(), 0);
        assert_eq!(split.test.iter().filter(|e| e.db_id == "tiny").count(), 0);
    }

    #[test]
    fn test_resplit_class_of_three_present_everywhere() {
        let examples = uniform_examples("c", 3);
        let ratios = SplitRatios::new(0.7, 0.15, 0.15).unwrap();
        let split = resplit(&examples, ratios, 5).unwrap();
        assert_eq!(split.train.len(), 1);
        assert_eq!(split.validation.len(), 1);
        assert_eq!(split.test.len(), 1);
    }

    #[test]
    fn test_resplit_rejects_bad_input() {
        let ratios = SplitRatios::new(0.7, 0.15, 0.15).unwrap();
        assert!(matches!(resplit(&[], ratios, 1), Err(CorpusError::EmptySplitInput)));
        assert!(SplitRatios::new(0.5, 0.2, 0.2).is_err());
        assert!(SplitRatios::new(0.7, 0.3, 0.0).is_err());
    }

    fn labels(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn test_merge_rule_based_suffix_strip() {
        let rules = vec![MergeRule::Pattern { pattern: "college_*".into(), new_label: "college".into() }];
        let map = merge_classes_rule_based(&labels(&["college_1", "college_2", "college_3"]), &rules).unwrap();
        assert_eq!(map.apply("college_1"), "college");
        assert_eq!(map.apply("college_2"), "college");
        assert_eq!(map.apply("college_3"), "college");
    }

    #[test]
    fn test_merge_rule_based_explicit() {
        let rules = vec![MergeRule::Explicit {
            members: vec!["department_management".into(), "department_store".into()],
            new_label: "department".into(),
        }];
        let map =
            merge_classes_rule_based(&labels(&["department_management", "department_store"]), &rules).unwrap();
        assert_eq!(map.apply("department_management"), "department");
        assert_eq!(map.apply("department_store"), "department");
    }

    #[test]
    fn test_merge_rule_based_identity_default() {
        let rules = vec![MergeRule::Pattern { pattern: "college_*".into(), new_label: "college".into() }];
        let map = merge_classes_rule_based(&labels(&["college_1", "farm"]), &rules).unwrap();
        assert_eq!(map.apply("farm"), "farm");
        assert!(map.mapping.contains_key("farm"));
    }

    #[test]
    fn test_merge_rule_based_conflict() {
        let rules = vec![
            MergeRule::Pattern { pattern: "college_*".into(), new_label: "college".into() },
            MergeRule::Explicit { members: vec!["college_1".into()], new_label: "uni".into() },
        ];
        let err = merge_classes_rule_based(&labels(&["college_1"]), &rules).unwrap_err();
        match err {
            CorpusError::MergeConflict { label, first, second } => {
                assert_eq!(label, "college_1");
                assert!(first.contains("college"));
                assert!(second.contains("uni"));
            }
            other => panic!("expected conflict, got {other}"),
        }
    }

    #[test]
    fn test_merge_rule_based_chain_detected() {
        let rules = vec![
            MergeRule::Explicit { members: vec!["a".into()], new_label: "b".into() },
            MergeRule::Explicit { members: vec!["b".into()], new_label: "c".into() },
        ];
        let err = merge_classes_rule_based(&labels(&["a", "b"]), &rules).unwrap_err();
        assert!(matches!(err, CorpusError::ChainedMerge { .. }));
    }

    #[test]
    fn test_trigram_cosine_music_musical() {
        // music: {mus, usi, sic}; musical: {mus, usi, sic, ica, cal};
        // overlap 3 -> 3 / (sqrt(3) * sqrt(5)).
        let expected = 3.0 / (3f64.sqrt() * 5f64.sqrt());
        let got = trigram_cosine("music", "musical");
        assert!((got - expected).abs() < 1e-12, "got {got}, expected {expected}");
        assert!(got >= 0.5);
    }

    #[test]
    fn test_merge_similarity_trigram_default() {
        let map = merge_classes_similarity(&labels(&["music", "musical"]), trigram_cosine, 0.5, &[]).unwrap();
        assert_eq!(map.apply("music"), "music_musical");
        assert_eq!(map.apply("musical"), "music_musical");
    }

    #[test]
    fn test_merge_similarity_three_way_cluster_name() {
        // Scripted similarity: music—musical and musical—theme link, music—theme
        // does not; single-link still forms one cluster of three.
        let sim = |a: &str, b: &str| -> f64 {
            let mut pair = [a, b];
            pair.sort();
            match (pair[0], pair[1]) {
                ("music", "musical") => 0.9,
                ("musical", "theme") => 0.6,
                _ => 0.1,
            }
        };
        let map = merge_classes_similarity(&labels(&["musical", "music", "theme"]), sim, 0.5, &[]).unwrap();
        assert_eq!(map.apply("music"), "music_musical_theme");
        assert_eq!(map.apply("musical"), "music_musical_theme");
        assert_eq!(map.apply("theme"), "music_musical_theme");
    }

    #[test]
    fn test_merge_similarity_override_name() {
        let sim = |_: &str, _: &str| 0.9;
        let overrides = vec![(
            labels(&["activity", "college", "school", "university"]),
            "university_school_college_activity".to_string(),
        )];
        let map = merge_classes_similarity(
            &labels(&["university", "school", "college", "activity"]),
            sim,
            0.5,
            &overrides,
        )
        .unwrap();
        assert_eq!(map.apply("school"), "university_school_college_activity");
    }

    #[test]
    fn test_merge_similarity_below_threshold_identity() {
        let map = merge_classes_similarity(&labels(&["music", "theme"]), trigram_cosine, 0.5, &[]).unwrap();
        assert_eq!(map.apply("music"), "music");
        assert_eq!(map.apply("theme"), "theme");
    }

    #[test]
    fn test_merge_similarity_rejects_bad_threshold() {
        assert!(merge_classes_similarity(&labels(&["a"]), trigram_cosine, 0.0, &[]).is_err());
        assert!(merge_classes_similarity(&labels(&["a"]), trigram_cosine, 1.0, &[]).is_err());
    }

    fn catalog_with(dbs: &[(&str, bool)], dir: &tempfile::TempDir) -> SchemaCatalog {
        let mut entries = BTreeMap::new();
        for (db_id, has_file) in dbs {
            let db_file = if *has_file {
                let p = dir.path().join(format!("{db_id}.sqlite"));
                std::fs::write(&p, b"stub").unwrap();
                Some(p)
            } else {
                None
            };
            entries.insert(
                db_id.to_string(),
                CatalogEntry {
                    schema: DatabaseSchema {
                        db_id: db_id.to_string(),
                        tables: vec![],
                        foreign_keys: vec![],
                    },
                    db_file,
                },
            );
        }
        SchemaCatalog { entries }
    }

    #[test]
    fn test_filter_invalid_drop_counts() {
        let dir = tempfile::tempdir().unwrap();
        let catalog = catalog_with(&[("known", true)], &dir);
        // 1058 examples, 93 with a db_id missing from the catalog.
        let mut examples = uniform_examples("known", 965);
        examples.extend(uniform_examples("ghost", 93));
        let (kept, report) = filter_invalid(&examples, &catalog, true);
        assert_eq!(kept.len(), 965);
        assert_eq!(report.count(DropReason::MissingSchema), 93);
    }

    #[test]
    fn test_filter_invalid_noop_when_all_covered() {
        let dir = tempfile::tempdir().unwrap();
        let catalog = catalog_with(&[("a", true)], &dir);
        let examples = uniform_examples("a", 5);
        let (kept, report) = filter_invalid(&examples, &catalog, true);
        assert_eq!(kept.len(), 5);
        assert!(report.is_empty());
    }

    #[test]
    fn test_filter_invalid_missing_db_file_reason() {
        let dir = tempfile::tempdir().unwrap();
        let catalog = catalog_with(&[("nofile", false)], &dir);
        let examples = uniform_examples("nofile", 2);

        let (kept, report) = filter_invalid(&examples, &catalog, true);
        assert!(kept.is_empty());
        assert_eq!(report.count(DropReason::MissingDbFile), 2);

        // Execution not required: the entry alone is enough.
        let (kept, report) = filter_invalid(&examples, &catalog, false);
        assert_eq!(kept.len(), 2);
        assert!(report.is_empty());
    }

    #[test]
    fn test_glob_match_edges() {
        assert!(glob_match("college_*", "college_1"));
        assert!(!glob_match("college_*", "college"));
        assert!(glob_match("*", "anything"));
        assert!(glob_match("a*c", "abc"));
        assert!(glob_match("a*c", "ac"));
        assert!(!glob_match("a*c", "ab"));
    }
}
