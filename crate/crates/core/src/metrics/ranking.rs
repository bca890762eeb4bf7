//! Ranking metrics for db_id prediction: MAP, NDCG, P@1, R@1.
//!
//! The default instantiation is single-gold binary relevance (one correct
//! class per query): AP = 1/rank of the gold class, NDCG uses
//! DCG = 1/log2(rank+1) with IDCG = 1, and P@1 = R@1. Multi-gold variants
//! are provided for merged-label setups where a query can admit several
//! correct classes.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

/// One query's ranked class predictions against its gold class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub gold_class: String,
    /// Distinct classes, best first.
    pub ranked_classes: Vec<String>,
    pub scores: Vec<f64>,
}

impl RankedPrediction {
    pub fn new(gold_class: impl Into<String>, ranked_classes: Vec<String>, scores: Vec<f64>) -> Self {
        Self { gold_class: gold_class.into(), ranked_classes, scores }
    }

    /// 1-based rank of the gold class, if it appears.
    pub fn gold_rank(&self) -> Option<usize> {
        self.ranked_classes.iter().position(|c| *c == self.gold_class).map(|i| i + 1)
    }
}

/// Mean average precision with a single relevant label per query:
/// AP = 1/rank(gold), or 0 when gold is absent from the ranking.
pub fn map_score(predictions: &[RankedPrediction]) -> f64 {
    assert!(!predictions.is_empty(), "map_score over an empty prediction list");
    let total: f64 = predictions
        .iter()
        .map(|p| p.gold_rank().map(|r| 1.0 / r as f64).unwrap_or(0.0))
        .sum();
    total / predictions.len() as f64
}

/// Binary-relevance NDCG: DCG = 1/log2(rank+1) at the gold rank (0 when
/// absent), IDCG = 1.
pub fn ndcg_score(predictions: &[RankedPrediction]) -> f64 {
    assert!(!predictions.is_empty(), "ndcg_score over an empty prediction list");
    let total: f64 = predictions
        .iter()
        .map(|p| p.gold_rank().map(|r| 1.0 / ((r as f64) + 1.0).log2()).unwrap_or(0.0))
        .sum();
    total / predictions.len() as f64
}

/// With one relevant label per query, P@1 and R@1 coincide: the fraction of
/// queries whose rank-1 class is the gold class.
pub fn precision_recall_at_1(predictions: &[RankedPrediction]) -> (f64, f64) {
    assert!(!predictions.is_empty(), "precision_recall_at_1 over an empty prediction list");
    let hits = predictions.iter().filter(|p| p.gold_rank() == Some(1)).count();
    let frac = hits as f64 / predictions.len() as f64;
    (frac, frac)
}

/// A query with several acceptable gold classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiGoldPrediction {
    pub gold_classes: BTreeSet<String>,
    pub ranked_classes: Vec<String>,
}

/// Multi-gold MAP: AP = (sum of precision@k over relevant ranks k) / |gold|.
pub fn map_score_multi(predictions: &[MultiGoldPrediction]) -> f64 {
    assert!(!predictions.is_empty(), "map_score_multi over an empty prediction list");
    let total: f64 = predictions
        .iter()
        .map(|p| {
            if p.gold_classes.is_empty() {
                return 0.0;
            }
            let mut hits = 0usize;
            let mut ap = 0.0;
            for (i, class) in p.ranked_classes.iter().enumerate() {
                if p.gold_classes.contains(class) {
                    hits += 1;
                    ap += hits as f64 / (i + 1) as f64;
                }
            }
            ap / p.gold_classes.len() as f64
        })
        .sum();
    total / predictions.len() as f64
}

/// Multi-gold binary NDCG: DCG over all relevant ranks, IDCG assumes the
/// relevant classes fill the top positions.
pub fn ndcg_score_multi(predictions: &[MultiGoldPrediction]) -> f64 {
    assert!(!predictions.is_empty(), "ndcg_score_multi over an empty prediction list");
    let total: f64 = predictions
        .iter()
        .map(|p| {
            if p.gold_classes.is_empty() {
                return 0.0;
            }
            let dcg: f64 = p
                .ranked_classes
                .iter()
                .enumerate()
                .filter(|(_, c)| p.gold_classes.contains(*c))
                .map(|(i, _)| 1.0 / ((i as f64) + 2.0).log2())
                .sum();
            let ideal_hits = p.gold_classes.len().min(p.ranked_classes.len().max(1));
            let idcg: f64 = (0..ideal_hits).map(|i| 1.0 / ((i as f64) + 2.0).log2()).sum();
            if idcg == 0.0 {
                0.0
            } else {
                dcg / idcg
            }
        })
        .sum();
    total / predictions.len() as f64
}

/// Multi-gold P@1 and R@1. P@1 counts a relevant top-1; R@1 is the fraction
/// of the gold set retrieved by the single top prediction.
pub fn precision_recall_at_1_multi(predictions: &[MultiGoldPrediction]) -> (f64, f64) {
    assert!(!predictions.is_empty(), "precision_recall_at_1_multi over an empty prediction list");
    let mut p_total = 0.0;
    let mut r_total = 0.0;
    for p in predictions {
        let top_hit = p
            .ranked_classes
            .first()
            .is_some_and(|c| p.gold_classes.contains(c));
        if top_hit {
            p_total += 1.0;
            r_total += 1.0 / p.gold_classes.len() as f64;
        }
    }
    (p_total / predictions.len() as f64, r_total / predictions.len() as f64)
}
