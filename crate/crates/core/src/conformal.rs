//! Split-conformal calibration over pooled beliefs.
//!
//! Non-conformity scores come in two kinds:
//!
//! - [`ScoreKind::Prob`]: `s(x, y) = 1 - P(y | x)`.
//! - [`ScoreKind::Rank`]: cumulative pooled mass of every label ranked at or
//!   above `y` in the descending sort (equal probabilities ordered by label index).
//!
//! Calibration takes the `⌈(n+1)(1-α)⌉`-th smallest true-label score as the
//! threshold `q̂`. When that rank exceeds `n` the threshold is pinned to the
//! score maximum (1.0) and flagged as saturated, so every label enters the set.
//! Prediction sets are `{y : s(x, y) ≤ q̂}`.
//!
//! For the probability score the set is equivalently `{y : P(y|x) ≥ 1 - q̂}`,
//! which gives the closed-form action conditions on the top-two pooled
//! probabilities and the cardinality bound `⌊1/(1 - q̂)⌋`.

use thiserror::Error;

use crate::domain::{Action, CalibrationResult, Distribution, PredictionSet, ScoreKind};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConformalError {
    #[error("label {label} outside label space of size {k}")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("calibration set is empty")]
    EmptyCalibrationSet,
    #[error("alpha {0} is not in (0, 1)")]
    AlphaOutOfRange(f64),
    #[error("calibration score {0} is not finite")]
    NonFiniteScore(f64),
    #[error("operation requires the probability score, calibration used {0}")]
    WrongScoreKind(ScoreKind),
}

/// Slack used when rounding `(n+1)(1-α)` up, so products that are integral in
/// exact arithmetic are not pushed to the next rank by binary rounding.
pub const LEVEL_SLACK: f64 = 1e-9;

fn check_label(social: &Distribution, y: usize) -> Result<(), ConformalError> {
    if y >= social.len() {
        return Err(ConformalError::LabelOutOfRange { label: y, k: social.len() });
    }
    Ok(())
}

pub fn score_prob(social: &Distribution, y: usize) -> Result<f64, ConformalError> {
    check_label(social, y)?;
    Ok(1.0 - social.probs()[y])
}

/// Labels ordered by descending probability, ties broken by ascending label index.
pub fn descending_order(social: &Distribution) -> Vec<usize> {
    let p = social.probs();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    order
}

/// Rank-based cumulative scores for every label, in label-index order.
pub fn rank_scores(social: &Distribution) -> Vec<f64> {
    let p = social.probs();
    let mut scores = vec![0.0; p.len()];
    let mut cumulative = 0.0;
    for label in descending_order(social) {
        cumulative += p[label];
        scores[label] = cumulative.min(SCORE_MAX);
    }
    scores
}

pub fn score_rank(social: &Distribution, y: usize) -> Result<f64, ConformalError> {
    check_label(social, y)?;
    Ok(rank_scores(social)[y])
}

pub fn score(social: &Distribution, y: usize, kind: ScoreKind) -> Result<f64, ConformalError> {
    match kind {
        ScoreKind::Prob => score_prob(social, y),
        ScoreKind::Rank => score_rank(social, y),
    }
}

/// Scores of every label under `kind`.
pub fn all_scores(social: &Distribution, kind: ScoreKind) -> Vec<f64> {
    match kind {
        ScoreKind::Prob => social.probs().iter().map(|p| 1.0 - p).collect(),
        ScoreKind::Rank => rank_scores(social),
    }
}

/// The 1-based rank `⌈(n+1)(1-α)⌉` used to pick the threshold.
pub fn quantile_rank(n: usize, alpha: f64) -> usize {
    let level = (n as f64 + 1.0) * (1.0 - alpha);
    (level - LEVEL_SLACK).ceil().max(1.0) as usize
}

pub fn check_alpha(alpha: f64) -> Result<(), ConformalError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ConformalError::AlphaOutOfRange(alpha));
    }
    Ok(())
}

/// Largest possible score value; used as the saturated threshold for both kinds.
pub const SCORE_MAX: f64 = 1.0;

/// Computes `q̂` from the true-label scores of a calibration split.
pub fn calibrate(
    true_label_scores: &[f64],
    alpha: f64,
    round: usize,
    score_kind: ScoreKind,
) -> Result<CalibrationResult, ConformalError> {
    check_alpha(alpha)?;
    let n = true_label_scores.len();
    if n == 0 {
        return Err(ConformalError::EmptyCalibrationSet);
    }
    if let Some(&s) = true_label_scores.iter().find(|s| !s.is_finite()) {
        return Err(ConformalError::NonFiniteScore(s));
    }
    let rank = quantile_rank(n, alpha);
    let (q_hat, saturated) = if rank > n {
        (SCORE_MAX, true)
    } else {
        let mut scratch = true_label_scores.to_vec();
        let (_, kth, _) = scratch.select_nth_unstable_by(rank - 1, f64::total_cmp);
        (*kth, false)
    };
    Ok(CalibrationResult { alpha, round, score_kind, q_hat, n_cal: n, saturated })
}

/// `{y : s(x, y) ≤ q̂}` under the calibration's score kind, with its action.
pub fn build_set(social: &Distribution, cal: &CalibrationResult) -> PredictionSet {
    build_set_with(social, cal.q_hat, cal.score_kind)
}

pub fn build_set_with(social: &Distribution, q_hat: f64, kind: ScoreKind) -> PredictionSet {
    let members = all_scores(social, kind)
        .iter()
        .enumerate()
        .filter(|(_, &s)| s <= q_hat)
        .map(|(y, _)| y)
        .collect();
    let tau = match kind {
        ScoreKind::Prob => Some(1.0 - q_hat),
        ScoreKind::Rank => None,
    };
    PredictionSet::new(members, tau)
}

/// The same set, written as `{y : P(y|x) ≥ 1 - q̂}`.
pub fn threshold_form_set(social: &Distribution, q_hat: f64, kind: ScoreKind) -> Result<PredictionSet, ConformalError> {
    if kind != ScoreKind::Prob {
        return Err(ConformalError::WrongScoreKind(kind));
    }
    let tau = 1.0 - q_hat;
    let members = social.probs().iter().enumerate().filter(|(_, &p)| p >= tau).map(|(y, _)| y).collect();
    Ok(PredictionSet::new(members, Some(tau)))
}

/// The action implied by the top-two pooled probabilities and `τ = 1 - q̂`,
/// without building the set.
pub fn singleton_conditions(social: &Distribution, q_hat: f64) -> Action {
    let tau = 1.0 - q_hat;
    let (p1, p2) = social.top_two();
    if p1 < tau {
        Action::FullReview
    } else if p2 >= tau {
        Action::Escalate
    } else {
        Action::Automate
    }
}

/// `p1 ≥ τ ∧ Δ > q̂`; implies a singleton set but is not necessary for one.
pub fn sufficient_singleton(social: &Distribution, q_hat: f64) -> bool {
    let (p1, p2) = social.top_two();
    p1 >= 1.0 - q_hat && p1 - p2 > q_hat
}

/// `min(⌊1/(1 - q̂)⌋, K)`; `K` once `q̂ ≥ 1`.
pub fn cardinality_bound(q_hat: f64, k: usize) -> usize {
    if q_hat >= 1.0 {
        return k;
    }
    let bound = (1.0 / (1.0 - q_hat)).floor();
    if bound >= k as f64 {
        k
    } else {
        bound as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn d(p: &[f64]) -> Distribution {
        Distribution::validate(p.to_vec(), p.len()).unwrap()
    }

    fn cal(q_hat: f64) -> CalibrationResult {
        CalibrationResult { alpha: 0.1, round: 0, score_kind: ScoreKind::Prob, q_hat, n_cal: 10, saturated: false }
    }

    #[test]
    fn probability_scores() {
        assert_abs_diff_eq!(score_prob(&d(&[0.7, 0.3]), 0).unwrap(), 0.3, epsilon = 1e-12);
        assert_eq!(score_prob(&d(&[1.0, 0.0]), 0).unwrap(), 0.0);
        assert_eq!(score_prob(&d(&[1.0, 0.0]), 1).unwrap(), 1.0);
        assert_eq!(score_prob(&d(&[1.0, 0.0]), 2), Err(ConformalError::LabelOutOfRange { label: 2, k: 2 }));
    }

    #[test]
    fn rank_scores_accumulate_by_rank() {
        let p = d(&[0.3, 0.5, 0.2]);
        assert_abs_diff_eq!(score_rank(&p, 1).unwrap(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(score_rank(&p, 0).unwrap(), 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(score_rank(&p, 2).unwrap(), 1.0, epsilon = 1e-12);
        assert!(score_rank(&p, 3).is_err());
    }

    #[test]
    fn rank_ties_follow_label_order() {
        let scores = rank_scores(&d(&[0.25, 0.25, 0.5]));
        assert_eq!(scores, vec![0.75, 1.0, 0.5]);
    }

    #[test]
    fn rank_scores_never_exceed_one() {
        let social = d(&[0.55, 0.34, 0.11]);
        assert_eq!(rank_scores(&social)[2], 1.0);
        assert_eq!(build_set_with(&social, 1.0, ScoreKind::Rank).len(), 3);
    }

    #[test]
    fn calibrate_nine_scores_at_ten_percent() {
        let scores: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();
        let r = calibrate(&scores, 0.1, 0, ScoreKind::Prob).unwrap();
        assert_eq!(r.q_hat, 0.9);
        assert!(!r.saturated);
        assert_eq!(r.n_cal, 9);
    }

    #[test]
    fn calibrate_saturates_when_rank_exceeds_n() {
        let scores: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();
        let r = calibrate(&scores, 0.05, 2, ScoreKind::Rank).unwrap();
        assert_eq!(r.q_hat, 1.0);
        assert!(r.saturated);
        assert_eq!((r.round, r.score_kind), (2, ScoreKind::Rank));
    }

    #[test]
    fn calibrate_nineteen_scores() {
        let scores: Vec<f64> = (1..=19).rev().map(|k| 0.05 * k as f64).collect();
        let r = calibrate(&scores, 0.1, 0, ScoreKind::Prob).unwrap();
        assert_eq!(quantile_rank(19, 0.1), 18);
        assert_eq!(r.q_hat, 0.05 * 18.0);
    }

    #[test]
    fn calibrate_errors() {
        assert_eq!(calibrate(&[], 0.1, 0, ScoreKind::Prob), Err(ConformalError::EmptyCalibrationSet));
        assert_eq!(calibrate(&[0.2], 0.0, 0, ScoreKind::Prob), Err(ConformalError::AlphaOutOfRange(0.0)));
        assert_eq!(calibrate(&[0.2], 1.0, 0, ScoreKind::Prob), Err(ConformalError::AlphaOutOfRange(1.0)));
        assert!(matches!(calibrate(&[f64::NAN], 0.5, 0, ScoreKind::Prob), Err(ConformalError::NonFiniteScore(_))));
    }

    #[test]
    fn quantile_rank_integral_levels() {
        assert_eq!(quantile_rank(9, 0.1), 9);
        assert_eq!(quantile_rank(99, 0.01), 99);
        assert_eq!(quantile_rank(98, 0.01), 99);
        assert_eq!(quantile_rank(500, 0.05), 476);
        assert_eq!(quantile_rank(19, 0.05), 19);
    }

    fn spread(head: &[f64], k: usize) -> Distribution {
        let rest = (1.0 - head.iter().sum::<f64>()) / (k - head.len()) as f64;
        let mut p = head.to_vec();
        p.resize(k, rest);
        d(&p)
    }

    #[test]
    fn set_construction_cases() {
        let single = build_set(&spread(&[0.5, 0.25], 10), &cal(0.7));
        assert_eq!(single.members(), &[0]);
        assert_eq!(single.action(), Action::Automate);
        assert_abs_diff_eq!(single.tau().unwrap(), 0.3, epsilon = 1e-12);

        let pair = build_set(&spread(&[0.4, 0.35], 10), &cal(0.7));
        assert_eq!(pair.members(), &[0, 1]);
        assert_eq!(pair.action(), Action::Escalate);

        let empty = build_set(&spread(&[0.25, 0.25, 0.25], 10), &cal(0.7));
        assert!(empty.is_empty());
        assert_eq!(empty.action(), Action::FullReview);
    }

    #[test]
    fn rank_sets_have_no_tau() {
        let set = build_set_with(&d(&[0.5, 0.3, 0.2]), 0.8, ScoreKind::Rank);
        assert_eq!(set.members(), &[0, 1]);
        assert_eq!(set.tau(), None);
    }

    #[test]
    fn threshold_form_cases() {
        assert_eq!(threshold_form_set(&d(&[0.6, 0.4]), 0.7, ScoreKind::Prob).unwrap().members(), &[0, 1]);
        assert_eq!(threshold_form_set(&d(&[0.0, 1.0, 0.0]), 0.0, ScoreKind::Prob).unwrap().members(), &[1]);
        assert_eq!(threshold_form_set(&d(&[0.2, 0.3, 0.5]), 0.0, ScoreKind::Prob).unwrap().members(), &[] as &[usize]);
        assert_eq!(threshold_form_set(&d(&[0.0, 0.3, 0.7]), 1.0, ScoreKind::Prob).unwrap().members(), &[0, 1, 2]);
        assert_eq!(
            threshold_form_set(&d(&[0.5, 0.5]), 0.5, ScoreKind::Rank),
            Err(ConformalError::WrongScoreKind(ScoreKind::Rank))
        );
    }

    #[test]
    fn closed_form_actions() {
        assert_eq!(singleton_conditions(&spread(&[0.9, 0.05], 10), 0.8), Action::Automate);
        assert_eq!(singleton_conditions(&spread(&[0.4, 0.35], 10), 0.7), Action::Escalate);
        assert_eq!(singleton_conditions(&spread(&[0.25, 0.25, 0.25], 10), 0.7), Action::FullReview);
    }

    #[test]
    fn sufficient_condition_examples() {
        assert!(sufficient_singleton(&spread(&[0.95, 0.02], 10), 0.2));
        let close = spread(&[0.5, 0.45], 10);
        assert!(!sufficient_singleton(&close, 0.2));
        // Not necessary: τ = 0.48 admits only the top label.
        assert_eq!(singleton_conditions(&close, 0.52), Action::Automate);
        assert!(!sufficient_singleton(&close, 0.52));
        assert!(!sufficient_singleton(&d(&[1.0, 0.0]), 1.0));
    }

    #[test]
    fn cardinality_bounds() {
        assert_eq!(cardinality_bound(0.75, 10), 4);
        assert_eq!(cardinality_bound(0.5, 10), 2);
        assert_eq!(cardinality_bound(1.0, 10), 10);
        assert_eq!(cardinality_bound(0.95, 10), 10);
        assert_eq!(cardinality_bound(0.0, 10), 1);
    }
}
