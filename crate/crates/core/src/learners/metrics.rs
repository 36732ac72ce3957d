//! Ranking and set-overlap metrics.

use serde::{Deserialize, Serialize};

use crate::corpus::MatchPairs;

/// Evaluation metrics; `auc` is present only when scores were available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Mann-Whitney AUC: the probability that a random positive outscores a
/// random negative, counting ties as one half.
pub fn auc(scores_pos: &[f64], scores_neg: &[f64]) -> f64 {
    assert!(
        !scores_pos.is_empty() && !scores_neg.is_empty(),
        "AUC needs both classes"
    );
    let mut all: Vec<(f64, bool)> = Vec::with_capacity(scores_pos.len() + scores_neg.len());
    all.extend(scores_pos.iter().map(|&s| (s, true)));
    all.extend(scores_neg.iter().map(|&s| (s, false)));
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Sum of average ranks over the positives, handling tie runs.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = ((i + 1) + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let n_pos = scores_pos.len() as f64;
    let n_neg = scores_neg.len() as f64;
    (rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

/// Precision, recall, and F1 of a predicted pair set against the truth.
pub fn prf1(predicted: &MatchPairs, truth: &MatchPairs) -> Metrics {
    let hits = predicted.intersection_count(truth) as f64;
    let precision = if predicted.is_empty() {
        0.0
    } else {
        hits / predicted.len() as f64
    };
    let recall = if truth.is_empty() {
        0.0
    } else {
        hits / truth.len() as f64
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Metrics {
        auc: None,
        precision,
        recall,
        f1,
    }
}
