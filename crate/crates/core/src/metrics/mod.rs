//! Evaluation: ranking metrics for the router, SQL equivalence by clause-set
//! comparison (exact set match) and by sandboxed execution (execution
//! accuracy), and report assembly.

pub mod exec;
pub mod ranking;
pub mod report;
pub mod sqlparse;

pub use exec::{execution_accuracy, ExecOutcome, ExecStatus};
pub use ranking::{
    map_score, map_score_multi, ndcg_score, ndcg_score_multi, precision_recall_at_1,
    precision_recall_at_1_multi, MultiGoldPrediction, RankedPrediction,
};
pub use report::{evaluate_run, Aggregates, EvalConfig, EvalReport, ExampleRecord, PipelineOutput};
pub use sqlparse::{exact_set_match, parse_sql_clauses, render_sql, EmConfig, SqlClauseSet};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("sql parse error at token {pos}: {message}")]
    SqlParse { pos: usize, message: String },
    #[error("gold sql is unparseable: {0}")]
    GoldUnparseable(String),
    #[error("misaligned inputs: {examples} examples vs {outputs} pipeline outputs")]
    Misaligned { examples: usize, outputs: usize },
    #[error("evaluation over zero examples")]
    EmptyRun,
    #[error("database error: {0}")]
    Db(String),
}
