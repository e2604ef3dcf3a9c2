//! Controller objectives and the over-budget penalty.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{NisError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    #[serde(rename = "sampled_recall_at_1")]
    SampledRecallAt1,
    RocAuc,
    NegXent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub objective: ObjectiveKind,
    /// Memory budget in embedding parameters.
    pub budget: u64,
    /// Sampled negatives per validation example (retrieval).
    #[serde(default = "default_negatives")]
    pub negatives: usize,
    /// Examples per ROC-AUC group (ranking).
    #[serde(default = "default_auc_group")]
    pub auc_group: usize,
    /// Count projection matrices toward the budget.
    #[serde(default)]
    pub include_projections: bool,
}

fn default_negatives() -> usize {
    100
}

fn default_auc_group() -> usize {
    100
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(NisError::config("budget must be positive"));
        }
        if self.negatives == 0 {
            return Err(NisError::config("at least one sampled negative is required"));
        }
        if self.auc_group < 2 {
            return Err(NisError::config("auc_group must be at least 2"));
        }
        Ok(())
    }
}

/// 1 when `true_logit` strictly beats every negative, else 0. Ties miss.
pub fn sampled_recall_at_1(true_logit: f64, neg_logits: &[f64]) -> f64 {
    debug_assert!(!neg_logits.is_empty());
    if neg_logits.iter().all(|&n| true_logit > n) {
        1.0
    } else {
        0.0
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counted as one half, computed from average ranks.
///
/// Returns `None` when `labels` holds only one class.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "one label per score");
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));

    // Doubled ranks keep tied averages integral: a tie block over 1-based
    // ranks lo..=hi has average rank (lo + hi) / 2.
    let mut doubled_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let doubled = (i + 1 + j + 1) as u64;
        for &idx in &order[i..=j] {
            if labels[idx] {
                doubled_rank_sum += doubled;
            }
        }
        i = j + 1;
    }
    let p = positives as u64;
    // 2U = 2R - p(p+1)
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Some(doubled_u as f64 / (2 * p * negatives as u64) as f64)
}

/// `max(C / budget - 1, 0)`.
pub fn cost_loss(total_cost: u64, budget: u64) -> f64 {
    assert!(budget > 0, "budget must be positive");
    (total_cost as f64 / budget as f64 - 1.0).max(0.0)
}

/// `O - C_L`.
pub fn reward(objective: f64, cost_loss: f64) -> f64 {
    objective - cost_loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn recall_examples() {
        assert_eq!(sampled_recall_at_1(2.0, &[1.0, 0.5]), 1.0);
        assert_eq!(sampled_recall_at_1(0.3, &[0.5]), 0.0);
        assert_eq!(sampled_recall_at_1(1.0, &[1.0]), 0.0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.1], &[true, false]), Some(1.0));
        assert_eq!(
            roc_auc(&[0.2, 0.7, 0.4, 0.9], &[false, true, true, false]),
            Some(0.5)
        );
        assert_eq!(roc_auc(&[0.3; 6], &[true, false, true, false, false, true]), Some(0.5));
        assert_eq!(roc_auc(&[0.1, 0.2], &[true, true]), None);
        assert_eq!(roc_auc(&[0.1, 0.2], &[false, false]), None);
    }

    #[test]
    fn cost_loss_examples() {
        assert_eq!(cost_loss(100, 100), 0.0);
        assert_eq!(cost_loss(150, 100), 0.5);
        assert_eq!(cost_loss(0, 100), 0.0);
        assert!((reward(0.8, 0.3) - 0.5).abs() < 1e-15);
        assert_eq!(reward(1.0, 0.0), 1.0);
    }

    proptest! {
        #[test]
        fn auc_matches_pair_counting(
            raw in prop::collection::vec((0u8..12, any::<bool>()), 2..200)
        ) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0 as f64 * 0.25).collect();
            let labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
            match roc_auc(&scores, &labels) {
                None => prop_assert!(labels.iter().all(|&l| l) || labels.iter().all(|&l| !l)),
                Some(a) => prop_assert_eq!(a, brute_force_auc(&scores, &labels)),
            }
        }

        #[test]
        fn auc_invariant_under_increasing_transform(
            raw in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..100)
        ) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let warped: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
            let labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
            prop_assert_eq!(roc_auc(&scores, &labels), roc_auc(&warped, &labels));
        }

        #[test]
        fn recall_agrees_with_argmax_when_untied(
            logits in prop::collection::hash_set(-1000i32..1000, 2..30)
        ) {
            let v: Vec<f64> = logits.into_iter().map(|x| x as f64).collect();
            let argmax = v.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            prop_assert_eq!(sampled_recall_at_1(v[0], &v[1..]) == 1.0, argmax == 0);
        }

        #[test]
        fn cost_loss_shape(c1 in 0u64..10_000, c2 in 0u64..10_000, budget in 1u64..5_000) {
            let (a, b) = (cost_loss(c1, budget), cost_loss(c2, budget));
            prop_assert!(a >= 0.0);
            if c1 <= budget { prop_assert_eq!(a, 0.0); }
            let dx = (c1 as f64 - c2 as f64).abs() / budget as f64;
            prop_assert!((a - b).abs() <= dx + 1e-12);
        }
    }
}
