//! End-to-end text-to-SQL pipeline: dataset preparation, LLM-generated
//! database-routing rules, a trainable db_id router, schema-linked SQL
//! generation, multi-agent self-correction, and evaluation.

pub mod corpus;
pub mod digest;
pub mod llm;
pub mod prompt;
pub mod rules;
pub mod router;
