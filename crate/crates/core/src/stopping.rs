//! Consensus and conformal stopping rules over a complete debate record.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::build_set;
use crate::domain::{argmax_of, Argmax, CalibrationResult, DebateRecord, PredictionSet, Weighting};
use crate::pool::{social_belief, PoolError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StopError {
    #[error("no calibration for round {0}")]
    MissingRoundCalibration(usize),
    #[error(transparent)]
    Pool(#[from] PoolError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    Consensus,
    Conformal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopOutcome {
    pub rule: StopRule,
    pub stop_round: usize,
    /// Unanimity (consensus) or a singleton set (conformal) was reached.
    pub resolved: bool,
    pub answer: Option<usize>,
    pub set_at_stop: Option<PredictionSet>,
}

/// Argmax of agent `i`'s round-`t` belief.
pub fn agent_argmax(record: &DebateRecord, t: usize, i: usize) -> Argmax {
    record.belief(t, i).dist.argmax()
}

/// Plurality of agent argmaxes at round `t`, ties to the lowest label.
pub fn majority_vote(record: &DebateRecord, t: usize) -> Argmax {
    let mut counts = vec![0.0; record.num_labels()];
    for i in 0..record.num_agents() {
        counts[agent_argmax(record, t, i).index] += 1.0;
    }
    argmax_of(&counts)
}

/// The label every agent's argmax agrees on at round `t`, if any.
pub fn unanimous_label(record: &DebateRecord, t: usize) -> Option<usize> {
    let first = agent_argmax(record, t, 0).index;
    (1..record.num_agents()).all(|i| agent_argmax(record, t, i).index == first).then_some(first)
}

/// Stops at the first unanimous round. Without unanimity the record stops at
/// the final round, unresolved, with that round's majority vote as its answer.
pub fn consensus_stop(record: &DebateRecord) -> StopOutcome {
    let last = record.num_rounds() - 1;
    for t in 0..=last {
        if let Some(label) = unanimous_label(record, t) {
            return StopOutcome {
                rule: StopRule::Consensus,
                stop_round: t,
                resolved: true,
                answer: Some(label),
                set_at_stop: None,
            };
        }
    }
    StopOutcome {
        rule: StopRule::Consensus,
        stop_round: last,
        resolved: false,
        answer: Some(majority_vote(record, last).index),
        set_at_stop: None,
    }
}

/// Prediction set for round `t` of a record under a calibrated threshold.
pub fn round_prediction_set(
    record: &DebateRecord,
    t: usize,
    cal: &CalibrationResult,
    weighting: Weighting,
) -> Result<PredictionSet, PoolError> {
    let social = social_belief(&record.round_dists(t), t, weighting)?;
    Ok(build_set(&social.dist, cal))
}

/// Stops at the first round whose prediction set is a singleton.
pub fn conformal_stop(
    record: &DebateRecord,
    per_round_cal: &BTreeMap<usize, CalibrationResult>,
    weighting: Weighting,
) -> Result<StopOutcome, StopError> {
    let rounds = record.num_rounds();
    if let Some(missing) = (0..rounds).find(|t| !per_round_cal.contains_key(t)) {
        return Err(StopError::MissingRoundCalibration(missing));
    }
    let mut last_set = None;
    for t in 0..rounds {
        let set = round_prediction_set(record, t, &per_round_cal[&t], weighting)?;
        if let Some(label) = set.singleton() {
            return Ok(StopOutcome {
                rule: StopRule::Conformal,
                stop_round: t,
                resolved: true,
                answer: Some(label),
                set_at_stop: Some(set),
            });
        }
        last_set = Some(set);
    }
    Ok(StopOutcome {
        rule: StopRule::Conformal,
        stop_round: rounds - 1,
        resolved: false,
        answer: None,
        set_at_stop: last_set,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Action, AgentRoundBelief, Distribution, LabelSpace, ParseStatus, ScoreKind};

    pub(crate) fn record(rounds: &[&[&[f64]]]) -> DebateRecord {
        let k = rounds[0][0].len();
        let table = rounds
            .iter()
            .enumerate()
            .map(|(t, agents)| {
                agents
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        AgentRoundBelief::new(
                            format!("a{i}"),
                            t,
                            Distribution::validate(p.to_vec(), k).unwrap(),
                            ParseStatus::Parsed,
                        )
                    })
                    .collect()
            })
            .collect();
        DebateRecord::new("r", LabelSpace::letters(k).unwrap(), Some(0), table).unwrap()
    }

    fn cal(round: usize, q_hat: f64) -> CalibrationResult {
        CalibrationResult { alpha: 0.1, round, score_kind: ScoreKind::Prob, q_hat, n_cal: 100, saturated: false }
    }

    #[test]
    fn argmax_and_ties() {
        let r = record(&[&[&[0.7, 0.3], &[0.5, 0.5]]]);
        assert_eq!(agent_argmax(&r, 0, 0), Argmax { index: 0, tied: false });
        assert_eq!(agent_argmax(&r, 0, 1), Argmax { index: 0, tied: true });
        let pm = Distribution::point_mass(10, 7);
        assert_eq!(pm.argmax().index, 7);
    }

    #[test]
    fn majority_votes() {
        let a = &[0.8, 0.1, 0.1][..];
        let b = &[0.1, 0.8, 0.1][..];
        let c = &[0.1, 0.1, 0.8][..];
        assert_eq!(majority_vote(&record(&[&[a, a, b]]), 0), Argmax { index: 0, tied: false });
        assert_eq!(majority_vote(&record(&[&[a, b, c]]), 0), Argmax { index: 0, tied: true });
        assert_eq!(majority_vote(&record(&[&[c]]), 0).index, 2);
    }

    #[test]
    fn consensus_rounds() {
        let a = &[0.8, 0.2][..];
        let b = &[0.2, 0.8][..];
        let out = consensus_stop(&record(&[&[a, a]]));
        assert_eq!((out.stop_round, out.resolved, out.answer), (0, true, Some(0)));

        let out = consensus_stop(&record(&[&[a, b], &[a, b], &[b, a], &[b, b]]));
        assert_eq!((out.stop_round, out.resolved, out.answer), (3, true, Some(1)));

        let c3 = &[0.1, 0.1, 0.8][..];
        let a3 = &[0.8, 0.1, 0.1][..];
        let never = record(&[&[a3, a3, c3], &[a3, c3, c3], &[a3, c3, c3], &[a3, c3, c3]]);
        let out = consensus_stop(&never);
        assert_eq!((out.stop_round, out.resolved, out.answer), (3, false, Some(2)));
    }

    #[test]
    fn conformal_stops_at_first_singleton() {
        // Pooled distributions give set sizes 3, 2, 1 under q_hat = 0.75 (tau = 0.25).
        let r = record(&[
            &[&[0.3, 0.3, 0.3, 0.1]],
            &[&[0.5, 0.4, 0.05, 0.05]],
            &[&[0.9, 0.05, 0.03, 0.02]],
            &[&[0.9, 0.05, 0.03, 0.02]],
        ]);
        let cals: BTreeMap<_, _> = (0..4).map(|t| (t, cal(t, 0.75))).collect();
        let out = conformal_stop(&r, &cals, Weighting::Uniform).unwrap();
        assert_eq!(out.stop_round, 2);
        assert!(out.resolved);
        assert_eq!(out.answer, Some(0));
        assert_eq!(out.set_at_stop.unwrap().len(), 1);
    }

    #[test]
    fn conformal_unresolved_escalates() {
        let flat = &[0.4, 0.3, 0.3][..];
        let r = record(&[&[flat], &[flat], &[flat], &[flat]]);
        let cals: BTreeMap<_, _> = (0..4).map(|t| (t, cal(t, 0.8))).collect();
        let out = conformal_stop(&r, &cals, Weighting::Uniform).unwrap();
        assert_eq!(out.stop_round, 3);
        assert!(!out.resolved);
        let set = out.set_at_stop.unwrap();
        assert!(set.len() > 1);
        assert_eq!(set.action(), Action::Escalate);
    }

    #[test]
    fn missing_round_calibration() {
        let r = record(&[&[&[0.5, 0.5]], &[&[0.5, 0.5]]]);
        let cals: BTreeMap<_, _> = [(0, cal(0, 0.5))].into();
        assert_eq!(conformal_stop(&r, &cals, Weighting::Uniform), Err(StopError::MissingRoundCalibration(1)));
    }
}
