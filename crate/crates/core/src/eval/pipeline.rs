use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{
    calibrate_round, compare_stopping, conformal_outcomes, group_by_partition, round_metrics_with, six, split_cal_test,
    stopping_round_distribution, wrong_consensus_analysis, EvalError, RoundMetrics, SafetyLedger, SplitAssignment,
    StopComparison,
};
use crate::domain::{CalibrationResult, DebateRecord, RunConfig, ScoreKind, Weighting};
use crate::stopping::{consensus_stop, StopOutcome, StopRule};

/// Alphas read back from files are compared with this slack.
const ALPHA_MATCH: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub partition: String,
    pub round: usize,
    pub alpha: f64,
    pub score_kind: ScoreKind,
    pub q_hat: f64,
    pub n_cal: usize,
    pub saturated: bool,
}

impl CalibrationEntry {
    pub fn result(&self) -> CalibrationResult {
        CalibrationResult {
            alpha: self.alpha,
            round: self.round,
            score_kind: self.score_kind,
            q_hat: self.q_hat,
            n_cal: self.n_cal,
            saturated: self.saturated,
        }
    }
}

/// Thresholds for every (partition, round, α) plus the split that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub partition_key: String,
    pub num_rounds: usize,
    pub split_ratio: f64,
    pub seed: u64,
    pub weighting: Weighting,
    pub score_kind: ScoreKind,
    pub splits: Vec<SplitAssignment>,
    pub entries: Vec<CalibrationEntry>,
}

impl CalibrationFile {
    /// Round-indexed thresholds for one partition and α; every round must be present.
    pub fn per_round(&self, partition: &str, alpha: f64) -> Result<BTreeMap<usize, CalibrationResult>, EvalError> {
        let found: BTreeMap<usize, CalibrationResult> = self
            .entries
            .iter()
            .filter(|e| e.partition == partition && (e.alpha - alpha).abs() <= ALPHA_MATCH)
            .map(|e| (e.round, e.result()))
            .collect();
        match (0..self.num_rounds).find(|t| !found.contains_key(t)) {
            Some(round) => Err(EvalError::MissingRoundCalibration { partition: partition.to_string(), round, alpha }),
            None => Ok(found),
        }
    }

    pub fn alphas(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for e in &self.entries {
            if !out.iter().any(|a| (a - e.alpha).abs() <= ALPHA_MATCH) {
                out.push(e.alpha);
            }
        }
        out.sort_by(f64::total_cmp);
        out
    }
}

fn check_rounds(records: &[DebateRecord], expected: usize) -> Result<(), EvalError> {
    match records.iter().find(|r| r.num_rounds() != expected) {
        Some(r) => Err(EvalError::RoundCountMismatch {
            question_id: r.question_id().to_string(),
            expected,
            got: r.num_rounds(),
        }),
        None => Ok(()),
    }
}

/// Splits each partition and calibrates every (round, α) on its calibration half.
pub fn calibrate_corpus(
    records: &[DebateRecord],
    config: &RunConfig,
    partition_key: &str,
) -> Result<CalibrationFile, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    check_rounds(records, config.num_rounds)?;
    let groups = group_by_partition(records, partition_key)?;
    let splits = split_cal_test(records, partition_key, config.split_ratio, config.seed)?;
    let mut entries = Vec::new();
    for split in &splits {
        let by_id: HashMap<&str, &DebateRecord> =
            groups[&split.partition].iter().map(|r| (r.question_id(), *r)).collect();
        let cal: Vec<&DebateRecord> = split.cal_ids.iter().map(|id| by_id[id.as_str()]).collect();
        for round in 0..config.num_rounds {
            for &alpha in &config.alphas {
                let result = calibrate_round(&cal, alpha, round, config.weighting, config.score_kind)?;
                entries.push(CalibrationEntry {
                    partition: split.partition.clone(),
                    round,
                    alpha,
                    score_kind: result.score_kind,
                    q_hat: result.q_hat,
                    n_cal: result.n_cal,
                    saturated: result.saturated,
                });
            }
        }
    }
    Ok(CalibrationFile {
        partition_key: partition_key.to_string(),
        num_rounds: config.num_rounds,
        split_ratio: config.split_ratio,
        seed: config.seed,
        weighting: config.weighting,
        score_kind: config.score_kind,
        splits,
        entries,
    })
}

/// One bucket of a stopping-round histogram.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StopRoundRow {
    pub partition: String,
    #[serde(serialize_with = "six")]
    pub alpha: f64,
    pub rule: StopRule,
    pub round: usize,
    #[serde(serialize_with = "six")]
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub partition_key: String,
    pub num_rounds: usize,
    pub weighting: Weighting,
    pub score_kind: ScoreKind,
    pub round_metrics: Vec<RoundMetrics>,
    pub stopping: Vec<StopComparison>,
    pub safety: Vec<SafetyLedger>,
    pub stop_rounds: Vec<StopRoundRow>,
}

fn histogram_rows(partition: &str, alpha: f64, rule: StopRule, fractions: Vec<f64>) -> impl Iterator<Item = StopRoundRow> + '_ {
    fractions.into_iter().enumerate().map(move |(round, fraction)| StopRoundRow {
        partition: partition.to_string(),
        alpha,
        rule,
        round,
        fraction,
    })
}

/// Evaluates the test half of every partition at each requested α.
/// An empty `alphas` evaluates every α present in the calibration file.
pub fn evaluate_corpus(
    records: &[DebateRecord],
    calibration: &CalibrationFile,
    alphas: &[f64],
) -> Result<EvaluationReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let rounds = calibration.num_rounds;
    check_rounds(records, rounds)?;
    let alphas = if alphas.is_empty() { calibration.alphas() } else { alphas.to_vec() };
    let groups = group_by_partition(records, &calibration.partition_key)?;
    let weighting = calibration.weighting;

    let mut report = EvaluationReport {
        partition_key: calibration.partition_key.clone(),
        num_rounds: rounds,
        weighting,
        score_kind: calibration.score_kind,
        round_metrics: Vec::new(),
        stopping: Vec::new(),
        safety: Vec::new(),
        stop_rounds: Vec::new(),
    };
    for split in &calibration.splits {
        let partition = split.partition.as_str();
        let by_id: HashMap<&str, &DebateRecord> = groups
            .get(partition)
            .map(|g| g.iter().map(|r| (r.question_id(), *r)).collect())
            .unwrap_or_default();
        let test = split
            .test_ids
            .iter()
            .map(|id| by_id.get(id.as_str()).copied().ok_or_else(|| EvalError::UnknownRecord(id.clone())))
            .collect::<Result<Vec<&DebateRecord>, _>>()?;
        if test.is_empty() {
            return Err(EvalError::EmptyCorpus);
        }
        let consensus: Vec<StopOutcome> = test.iter().map(|r| consensus_stop(r)).collect();
        let consensus_hist = stopping_round_distribution(&consensus, rounds)?;

        for &alpha in &alphas {
            let cals = calibration.per_round(partition, alpha)?;
            let outcomes = conformal_outcomes(&test, &cals, weighting)?;
            for round in 0..rounds {
                let mut m = round_metrics_with(&test, &outcomes, &cals[&round], round, weighting)?;
                m.partition = partition.to_string();
                report.round_metrics.push(m);
            }
            let mut comparison = compare_stopping(&test, &cals, weighting)?;
            comparison.partition = partition.to_string();
            report.stopping.push(comparison);

            let mut ledger = wrong_consensus_analysis(&test, &cals, weighting)?;
            ledger.partition = partition.to_string();
            report.safety.push(ledger);

            report.stop_rounds.extend(histogram_rows(partition, alpha, StopRule::Consensus, consensus_hist.clone()));
            let conformal_hist = stopping_round_distribution(&outcomes, rounds)?;
            report.stop_rounds.extend(histogram_rows(partition, alpha, StopRule::Conformal, conformal_hist));
        }
    }
    Ok(report)
}
