//! Sandboxed SQL execution and result comparison.
//!
//! Both queries run on a read-only connection with a per-query timeout.
//! Results compare as multisets of rows unless the gold query has a
//! top-level ORDER BY, in which case order matters. Cells compare exactly
//! for integers, text, blobs, and NULL; reals carry an absolute tolerance.

use std::cmp::Ordering;
use std::path::Path;
use std::time::{Duration, Instant};

use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};

use super::sqlparse::parse_sql_clauses;

/// Absolute tolerance for real-valued cells.
pub const REAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Ok,
    SqlError,
    Timeout,
}

/// Outcome of executing a predicted query against the gold query.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecOutcome {
    pub is_match: bool,
    pub pred_status: ExecStatus,
    pub gold_status: ExecStatus,
    /// (pred rows, gold rows), present when both queries executed.
    pub row_counts: Option<(usize, usize)>,
    pub mismatch_detail: Option<String>,
}

impl ExecOutcome {
    /// Short human-readable summary used in feedback prompts.
    pub fn diff_summary(&self) -> String {
        if self.is_match {
            return "results match".to_string();
        }
        let mut parts = Vec::new();
        match self.pred_status {
            ExecStatus::Ok => {}
            ExecStatus::SqlError => parts.push("predicted query failed to execute".to_string()),
            ExecStatus::Timeout => parts.push("predicted query timed out".to_string()),
        }
        match self.gold_status {
            ExecStatus::Ok => {}
            ExecStatus::SqlError => parts.push("gold query failed to execute".to_string()),
            ExecStatus::Timeout => parts.push("gold query timed out".to_string()),
        }
        if let Some((pred, gold)) = self.row_counts {
            parts.push(format!("row counts: predicted {pred}, expected {gold}"));
        }
        if let Some(detail) = &self.mismatch_detail {
            parts.push(detail.clone());
        }
        parts.join("; ")
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Cell {
    Null,
    Int(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl Cell {
    fn type_rank(&self) -> u8 {
        match self {
            Cell::Null => 0,
            Cell::Int(_) | Cell::Real(_) => 1,
            Cell::Text(_) => 2,
            Cell::Blob(_) => 3,
        }
    }

    fn as_f64(&self) -> f64 {
        match self {
            Cell::Int(i) => *i as f64,
            Cell::Real(r) => *r,
            _ => f64::NAN,
        }
    }

    /// Ordering for multiset comparison: rank, then value. Reals sort by
    /// total order so nearly-equal values in both lists line up.
    fn sort_cmp(&self, other: &Self) -> Ordering {
        self.type_rank().cmp(&other.type_rank()).then_with(|| match (self, other) {
            (Cell::Int(a), Cell::Int(b)) => a.cmp(b),
            (Cell::Text(a), Cell::Text(b)) => a.cmp(b),
            (Cell::Blob(a), Cell::Blob(b)) => a.cmp(b),
            (a, b) if a.type_rank() == 1 => a.as_f64().total_cmp(&b.as_f64()),
            _ => Ordering::Equal,
        })
    }

    /// Equality with the real-number tolerance. Integer/integer pairs stay
    /// exact; any pair involving a real compares numerically.
    fn tolerant_eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Cell::Null, Cell::Null) => true,
            (Cell::Int(a), Cell::Int(b)) => a == b,
            (Cell::Text(a), Cell::Text(b)) => a == b,
            (Cell::Blob(a), Cell::Blob(b)) => a == b,
            (a, b) if a.type_rank() == 1 && b.type_rank() == 1 => {
                (a.as_f64() - b.as_f64()).abs() <= REAL_TOLERANCE
            }
            _ => false,
        }
    }
}

type Row = Vec<Cell>;

struct QueryResult {
    columns: usize,
    rows: Vec<Row>,
}

enum QueryFailure {
    SqlError(String),
    Timeout,
}

fn open_readonly(db_path: &Path) -> Result<Connection, String> {
    Connection::open_with_flags(
        db_path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )
    .map_err(|e| e.to_string())
}

fn run_query(conn: &Connection, sql: &str, timeout: Duration) -> Result<QueryResult, QueryFailure> {
    let deadline = Instant::now() + timeout;
    conn.progress_handler(1000, Some(move || Instant::now() > deadline));

    let result = (|| -> Result<QueryResult, rusqlite::Error> {
        let mut stmt = conn.prepare(sql.trim().trim_end_matches(';'))?;
        let columns = stmt.column_count();
        let mut rows = Vec::new();
        let mut raw = stmt.query([])?;
        while let Some(row) = raw.next()? {
            let mut cells = Vec::with_capacity(columns);
            for i in 0..columns {
                let cell = match row.get_ref(i)? {
                    rusqlite::types::ValueRef::Null => Cell::Null,
                    rusqlite::types::ValueRef::Integer(v) => Cell::Int(v),
                    rusqlite::types::ValueRef::Real(v) => Cell::Real(v),
                    rusqlite::types::ValueRef::Text(t) => {
                        Cell::Text(String::from_utf8_lossy(t).into_owned())
                    }
                    rusqlite::types::ValueRef::Blob(b) => Cell::Blob(b.to_vec()),
                };
                cells.push(cell);
            }
            rows.push(cells);
        }
        Ok(QueryResult { columns, rows })
    })();

    conn.progress_handler(0, None::<fn() -> bool>);

    result.map_err(|e| {
        let interrupted = matches!(
            &e,
            rusqlite::Error::SqliteFailure(err, _)
                if err.code == rusqlite::ErrorCode::OperationInterrupted
        );
        if interrupted {
            QueryFailure::Timeout
        } else {
            QueryFailure::SqlError(e.to_string())
        }
    })
}

fn rows_sorted(mut rows: Vec<Row>) -> Vec<Row> {
    rows.sort_by(|a, b| {
        for (x, y) in a.iter().zip(b.iter()) {
            let ord = x.sort_cmp(y);
            if ord != Ordering::Equal {
                return ord;
            }
        }
        Ordering::Equal
    });
    rows
}

fn rows_equal(pred: &[Row], gold: &[Row]) -> Option<String> {
    for (i, (p, g)) in pred.iter().zip(gold.iter()).enumerate() {
        for (j, (pc, gc)) in p.iter().zip(g.iter()).enumerate() {
            if !pc.tolerant_eq(gc) {
                return Some(format!("first differing cell at row {i}, column {j}"));
            }
        }
    }
    None
}

/// Does the gold query impose a top-level row order? Falls back to a keyword
/// scan when the gold query is outside the parser's grammar.
fn gold_is_ordered(gold_sql: &str) -> bool {
    match parse_sql_clauses(gold_sql) {
        Ok(cs) => !cs.order_by_items.is_empty(),
        Err(_) => {
            let collapsed = gold_sql.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");
            collapsed.contains("order by")
        }
    }
}

/// Execute both queries on the database (read-only, one statement each,
/// per-query timeout) and compare results.
pub fn execution_accuracy(pred_sql: &str, gold_sql: &str, db_path: &Path, timeout: Duration) -> ExecOutcome {
    let conn = match open_readonly(db_path) {
        Ok(c) => c,
        Err(e) => {
            return ExecOutcome {
                is_match: false,
                pred_status: ExecStatus::SqlError,
                gold_status: ExecStatus::SqlError,
                row_counts: None,
                mismatch_detail: Some(format!("cannot open database: {e}")),
            }
        }
    };

    let (pred_result, pred_status, pred_detail) = match run_query(&conn, pred_sql, timeout) {
        Ok(r) => (Some(r), ExecStatus::Ok, None),
        Err(QueryFailure::Timeout) => (None, ExecStatus::Timeout, None),
        Err(QueryFailure::SqlError(e)) => (None, ExecStatus::SqlError, Some(e)),
    };
    let (gold_result, gold_status, gold_detail) = match run_query(&conn, gold_sql, timeout) {
        Ok(r) => (Some(r), ExecStatus::Ok, None),
        Err(QueryFailure::Timeout) => (None, ExecStatus::Timeout, None),
        Err(QueryFailure::SqlError(e)) => (None, ExecStatus::SqlError, Some(e)),
    };

    let (pred, gold) = match (pred_result, gold_result) {
        (Some(p), Some(g)) => (p, g),
        _ => {
            let detail = pred_detail
                .map(|e| format!("predicted: {e}"))
                .into_iter()
                .chain(gold_detail.map(|e| format!("gold: {e}")))
                .collect::<Vec<_>>()
                .join("; ");
            return ExecOutcome {
                is_match: false,
                pred_status,
                gold_status,
                row_counts: None,
                mismatch_detail: (!detail.is_empty()).then_some(detail),
            };
        }
    };

    let row_counts = Some((pred.rows.len(), gold.rows.len()));

    if pred.columns != gold.columns {
        return ExecOutcome {
            is_match: false,
            pred_status,
            gold_status,
            row_counts,
            mismatch_detail: Some(format!(
                "column count {} vs {}",
                pred.columns, gold.columns
            )),
        };
    }
    if pred.rows.len() != gold.rows.len() {
        return ExecOutcome {
            is_match: false,
            pred_status,
            gold_status,
            row_counts,
            mismatch_detail: Some("row counts differ".to_string()),
        };
    }

    let detail = if gold_is_ordered(gold_sql) {
        rows_equal(&pred.rows, &gold.rows)
    } else {
        rows_equal(&rows_sorted(pred.rows), &rows_sorted(gold.rows))
    };

    ExecOutcome {
        is_match: detail.is_none(),
        pred_status,
        gold_status,
        row_counts,
        mismatch_detail: detail,
    }
}
