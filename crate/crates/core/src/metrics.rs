//! Reward and evaluation-metric arithmetic: scalar reward, budget utilization,
//! the summed over/under-budget cost metric, and anchored score normalization.

use crate::domain::{RevenueOutcome, RewardWeights, PHASES};
use crate::error::{Error, Result};

/// Scalar reward of a terminal outcome: `k1 * fee_ad + k2 * price_o`.
pub fn reward(outcome: &RevenueOutcome, weights: &RewardWeights) -> f64 {
    weights.k1 * outcome.fee_ad + weights.k2 * outcome.price_o
}

/// Per-phase utilization `realized_t / budget_t`.
pub fn utilizations(realized: &[f64; PHASES], budgets: &[f64; PHASES]) -> Result<[f64; PHASES]> {
    let mut out = [0.0; PHASES];
    for t in 0..PHASES {
        if !(budgets[t].is_finite() && budgets[t] > 0.0) {
            return Err(Error::config(format!(
                "phase {t} budget must be > 0, got {}",
                budgets[t]
            )));
        }
        out[t] = realized[t] / budgets[t];
    }
    Ok(out)
}

/// Summed cost metric `sum_t (realized_t / budget_t - 1)`; zero when every
/// phase sits exactly on budget.
pub fn cost_metric(realized: &[f64; PHASES], budgets: &[f64; PHASES]) -> Result<f64> {
    Ok(utilizations(realized, budgets)?.iter().map(|u| u - 1.0).sum())
}

/// Rescale a score onto the 0..100 band anchored at a random-policy score (0)
/// and an expert score (100).
pub fn normalized_score(score: f64, random_score: f64, expert_score: f64) -> Result<f64> {
    if !(score.is_finite() && random_score.is_finite() && expert_score.is_finite()) {
        return Err(Error::numeric("normalized_score inputs must be finite"));
    }
    if expert_score == random_score {
        return Err(Error::numeric(
            "normalized_score anchors are degenerate (expert == random)",
        ));
    }
    Ok(100.0 * (score - random_score) / (expert_score - random_score))
}
