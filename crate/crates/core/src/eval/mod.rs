//! Splits, per-round metrics, stopping comparisons and wrong-consensus accounting.

mod pipeline;
mod report;

use std::borrow::Borrow;
use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::conformal::{calibrate, score, ConformalError};
use crate::domain::{CalibrationResult, DebateRecord, ScoreKind, Weighting};
use crate::pool::{social_belief, PoolError};
use crate::seeding::rng_for;
use crate::stopping::{conformal_stop, consensus_stop, round_prediction_set, unanimous_label, StopError, StopOutcome, StopRule};

pub use pipeline::{calibrate_corpus, evaluate_corpus, CalibrationEntry, CalibrationFile, EvaluationReport, StopRoundRow};
pub use report::{emit_report, render_csv_tables, render_json, ReportError, ReportFiles};

/// Partition key that selects the record's own `partition` field rather than a `meta` entry.
pub const PARTITION_FIELD: &str = "partition";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("partition `{partition}` has {n} records; at least 2 are needed to split")]
    TooFewRecords { partition: String, n: usize },
    #[error("record `{0}` has no truth label")]
    MissingTruth(String),
    #[error("record `{question_id}` has no `{key}` entry to partition on")]
    MissingPartitionKey { question_id: String, key: String },
    #[error("question id `{0}` appears twice in one partition")]
    DuplicateQuestionId(String),
    #[error("record `{question_id}` has {got} rounds, expected {expected}")]
    RoundCountMismatch { question_id: String, expected: usize, got: usize },
    #[error("no calibration for partition `{partition}`, round {round}, alpha {alpha}")]
    MissingRoundCalibration { partition: String, round: usize, alpha: f64 },
    #[error("split refers to record `{0}`, which is not in the corpus")]
    UnknownRecord(String),
    #[error("no records to evaluate")]
    EmptyCorpus,
    #[error("split ratio {0} is not in (0, 1)")]
    InvalidRatio(f64),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
}

fn alpha_of(cals: &BTreeMap<usize, CalibrationResult>) -> f64 {
    cals.values().next().map_or(f64::NAN, |c| c.alpha)
}

fn missing_round(record: &DebateRecord, cals: &BTreeMap<usize, CalibrationResult>, round: usize) -> EvalError {
    EvalError::MissingRoundCalibration { partition: record.partition().to_string(), round, alpha: alpha_of(cals) }
}

/// Writes a float with six decimals; non-finite values become `null`.
pub(crate) fn six<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::Error as _;
    if !v.is_finite() {
        return s.serialize_none();
    }
    let raw = serde_json::value::RawValue::from_string(format!("{v:.6}")).map_err(S::Error::custom)?;
    raw.serialize(s)
}

pub(crate) fn six_opt<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(x) => six(x, s),
        None => s.serialize_none(),
    }
}

fn truth_of(record: &DebateRecord) -> Result<usize, EvalError> {
    record.truth().ok_or_else(|| EvalError::MissingTruth(record.question_id().to_string()))
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn ratio_opt(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// The partition a record belongs to under `key`.
pub fn partition_of(record: &DebateRecord, key: &str) -> Result<String, EvalError> {
    if key == PARTITION_FIELD {
        return Ok(record.partition().to_string());
    }
    record.meta().get(key).cloned().ok_or_else(|| EvalError::MissingPartitionKey {
        question_id: record.question_id().to_string(),
        key: key.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub partition_key: String,
    pub partition: String,
    pub cal_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
    pub ratio: f64,
}

/// Calibration size for `n` records: `⌈n·ratio⌉`, kept within `[1, n-1]`.
pub fn calibration_size(n: usize, ratio: f64) -> usize {
    let raw = (n as f64 * ratio - 1e-9).ceil() as usize;
    raw.clamp(1, n.saturating_sub(1).max(1))
}

/// Shuffles each partition's records (ordered by id first, so input order is
/// irrelevant) and splits them into calibration and test ids.
pub fn split_cal_test(
    records: &[DebateRecord],
    partition_key: &str,
    ratio: f64,
    seed: u64,
) -> Result<Vec<SplitAssignment>, EvalError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(EvalError::InvalidRatio(ratio));
    }
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for record in records {
        groups.entry(partition_of(record, partition_key)?).or_default().push(record.question_id().to_string());
    }
    let mut out = Vec::with_capacity(groups.len());
    for (partition, mut ids) in groups {
        if ids.len() < 2 {
            return Err(EvalError::TooFewRecords { partition, n: ids.len() });
        }
        ids.sort();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(EvalError::DuplicateQuestionId(w[0].clone()));
        }
        let mut rng = rng_for(seed, &[b"split", partition.as_bytes()]);
        ids.shuffle(&mut rng);
        let n_cal = calibration_size(ids.len(), ratio);
        let mut test_ids = ids.split_off(n_cal);
        let mut cal_ids = ids;
        cal_ids.sort();
        test_ids.sort();
        out.push(SplitAssignment { partition_key: partition_key.to_string(), partition, cal_ids, test_ids, seed, ratio });
    }
    Ok(out)
}

/// Calibrates one round from the true-label scores of `cal_records`.
pub fn calibrate_round<D: Borrow<DebateRecord> + Sync>(
    cal_records: &[D],
    alpha: f64,
    round: usize,
    weighting: Weighting,
    score_kind: ScoreKind,
) -> Result<CalibrationResult, EvalError> {
    let scores = cal_records
        .par_iter()
        .map(|r| {
            let r = r.borrow();
            let truth = truth_of(r)?;
            let social = social_belief(&r.round_dists(round), round, weighting)?;
            Ok(score(&social.dist, truth, score_kind)?)
        })
        .collect::<Result<Vec<f64>, EvalError>>()?;
    Ok(calibrate(&scores, alpha, round, score_kind)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub partition: String,
    pub round: usize,
    #[serde(serialize_with = "six")]
    pub alpha: f64,
    #[serde(serialize_with = "six")]
    pub q_hat: f64,
    #[serde(serialize_with = "six")]
    pub coverage: f64,
    #[serde(serialize_with = "six")]
    pub avg_set_size: f64,
    /// Fraction of records whose set became a singleton at or before this round.
    #[serde(rename = "singleton_rate", serialize_with = "six")]
    pub singleton_rate_cumulative: f64,
    /// Accuracy among records whose set first became a singleton at this round.
    #[serde(rename = "singleton_acc", serialize_with = "six_opt")]
    pub singleton_accuracy: Option<f64>,
    pub n_test: usize,
}

fn conformal_outcomes<D: Borrow<DebateRecord> + Sync>(
    records: &[D],
    cals: &BTreeMap<usize, CalibrationResult>,
    weighting: Weighting,
) -> Result<Vec<StopOutcome>, EvalError> {
    records
        .par_iter()
        .map(|r| {
            let r = r.borrow();
            conformal_stop(r, cals, weighting).map_err(|e| match e {
                StopError::MissingRoundCalibration(round) => missing_round(r, cals, round),
                StopError::Pool(p) => EvalError::Pool(p),
            })
        })
        .collect()
}

fn round_metrics_with<D: Borrow<DebateRecord> + Sync>(
    records: &[D],
    outcomes: &[StopOutcome],
    cal: &CalibrationResult,
    round: usize,
    weighting: Weighting,
) -> Result<RoundMetrics, EvalError> {
    let n = records.len();
    if n == 0 {
        return Err(EvalError::EmptyCorpus);
    }
    let per_record = records
        .par_iter()
        .map(|r| {
            let r = r.borrow();
            let truth = truth_of(r)?;
            let set = round_prediction_set(r, round, cal, weighting)?;
            Ok((set.contains(truth), set.len(), truth))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let covered = per_record.iter().filter(|(c, _, _)| *c).count();
    let total_size: usize = per_record.iter().map(|(_, s, _)| s).sum();
    let resolved_by = outcomes.iter().filter(|o| o.resolved && o.stop_round <= round).count();
    let (mut first_here, mut correct_here) = (0, 0);
    for (o, (_, _, truth)) in outcomes.iter().zip(&per_record) {
        if o.resolved && o.stop_round == round {
            first_here += 1;
            correct_here += usize::from(o.answer == Some(*truth));
        }
    }
    Ok(RoundMetrics {
        partition: records[0].borrow().partition().to_string(),
        round,
        alpha: cal.alpha,
        q_hat: cal.q_hat,
        coverage: ratio(covered, n),
        avg_set_size: total_size as f64 / n as f64,
        singleton_rate_cumulative: ratio(resolved_by, n),
        singleton_accuracy: ratio_opt(correct_here, first_here),
        n_test: n,
    })
}

/// Coverage, set size and singleton statistics for one round. An empty set counts as a miss.
pub fn compute_round_metrics<D: Borrow<DebateRecord> + Sync>(
    test_records: &[D],
    per_round_cal: &BTreeMap<usize, CalibrationResult>,
    round: usize,
    weighting: Weighting,
) -> Result<RoundMetrics, EvalError> {
    let first = test_records.first().ok_or(EvalError::EmptyCorpus)?.borrow();
    let cal = per_round_cal.get(&round).ok_or_else(|| missing_round(first, per_round_cal, round))?;
    let outcomes = conformal_outcomes(test_records, per_round_cal, weighting)?;
    round_metrics_with(test_records, &outcomes, cal, round, weighting)
}

/// `caught / max(1, introduced)`.
pub fn net_ratio(caught: usize, introduced: usize) -> f64 {
    caught as f64 / introduced.max(1) as f64
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SafetyLedger {
    pub partition: String,
    #[serde(serialize_with = "six")]
    pub alpha: f64,
    pub n_records: usize,
    /// Records without a unanimous argmax at round 0.
    pub initially_disagreeing: usize,
    /// Among initially disagreeing records: how many have reached unanimous
    /// wrong consensus at some round up to and including `t`.
    pub wrong_consensus_by_round: Vec<usize>,
    /// Records unanimous on a wrong label at round `t`.
    pub wrong_consensus_at_round: Vec<usize>,
    /// Of those, records whose round-`t` set has more than one member.
    pub wrong_consensus_rejected_at_round: Vec<usize>,
    pub correct_consensus_at_round: Vec<usize>,
    pub correct_consensus_rejected_at_round: Vec<usize>,
    /// Records not unanimously wrong at `t` whose round-`t` set is a wrong singleton.
    pub introduced_wrong_singletons_by_round: Vec<usize>,
    /// Final-round totals.
    pub wrong_consensus_total: usize,
    pub wrong_consensus_rejected: usize,
    pub correct_consensus_total: usize,
    pub correct_consensus_rejected: usize,
    pub introduced_wrong_singletons: usize,
    #[serde(serialize_with = "six")]
    pub net_ratio: f64,
}

impl SafetyLedger {
    /// Share of final-round wrong consensus whose set blocks automation.
    pub fn interception_rate(&self) -> Option<f64> {
        ratio_opt(self.wrong_consensus_rejected, self.wrong_consensus_total)
    }

    /// Share of final-round correct consensus that is escalated anyway.
    pub fn over_rejection_rate(&self) -> Option<f64> {
        ratio_opt(self.correct_consensus_rejected, self.correct_consensus_total)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cell {
    Wrong { rejected: bool },
    Correct { rejected: bool },
    Split,
}

struct RecordSafety {
    initially_disagreeing: bool,
    first_wrong_consensus: Option<usize>,
    cells: Vec<Cell>,
    introduced: Vec<bool>,
}

fn record_safety(
    record: &DebateRecord,
    cals: &BTreeMap<usize, CalibrationResult>,
    weighting: Weighting,
) -> Result<RecordSafety, EvalError> {
    let truth = truth_of(record)?;
    let rounds = record.num_rounds();
    let mut cells = Vec::with_capacity(rounds);
    let mut introduced = Vec::with_capacity(rounds);
    for t in 0..rounds {
        let cal = cals.get(&t).ok_or_else(|| missing_round(record, cals, t))?;
        let set = round_prediction_set(record, t, cal, weighting)?;
        let rejected = set.len() > 1;
        let cell = match unanimous_label(record, t) {
            Some(l) if l == truth => Cell::Correct { rejected },
            Some(_) => Cell::Wrong { rejected },
            None => Cell::Split,
        };
        let wrong_singleton = set.singleton().is_some_and(|l| l != truth);
        introduced.push(wrong_singleton && !matches!(cell, Cell::Wrong { .. }));
        cells.push(cell);
    }
    let initially_disagreeing = cells[0] == Cell::Split;
    let first_wrong_consensus = if initially_disagreeing {
        cells.iter().position(|c| matches!(c, Cell::Wrong { .. }))
    } else {
        None
    };
    Ok(RecordSafety { initially_disagreeing, first_wrong_consensus, cells, introduced })
}

/// Wrong-consensus convergence, interception and introduced-error bookkeeping.
pub fn wrong_consensus_analysis<D: Borrow<DebateRecord> + Sync>(
    test_records: &[D],
    per_round_cal: &BTreeMap<usize, CalibrationResult>,
    weighting: Weighting,
) -> Result<SafetyLedger, EvalError> {
    let first = test_records.first().ok_or(EvalError::EmptyCorpus)?.borrow();
    let rounds = first.num_rounds();
    let per_record = test_records
        .par_iter()
        .map(|r| {
            let r = r.borrow();
            if r.num_rounds() != rounds {
                return Err(EvalError::RoundCountMismatch {
                    question_id: r.question_id().to_string(),
                    expected: rounds,
                    got: r.num_rounds(),
                });
            }
            record_safety(r, per_round_cal, weighting)
        })
        .collect::<Result<Vec<_>, EvalError>>()?;

    let mut ledger = SafetyLedger {
        partition: first.partition().to_string(),
        alpha: alpha_of(per_round_cal),
        n_records: test_records.len(),
        wrong_consensus_by_round: vec![0; rounds],
        wrong_consensus_at_round: vec![0; rounds],
        wrong_consensus_rejected_at_round: vec![0; rounds],
        correct_consensus_at_round: vec![0; rounds],
        correct_consensus_rejected_at_round: vec![0; rounds],
        introduced_wrong_singletons_by_round: vec![0; rounds],
        ..SafetyLedger::default()
    };
    for rec in &per_record {
        ledger.initially_disagreeing += usize::from(rec.initially_disagreeing);
        if let Some(first_wc) = rec.first_wrong_consensus {
            ledger.wrong_consensus_by_round[first_wc..].iter_mut().for_each(|c| *c += 1);
        }
        for (t, cell) in rec.cells.iter().enumerate() {
            match *cell {
                Cell::Wrong { rejected } => {
                    ledger.wrong_consensus_at_round[t] += 1;
                    ledger.wrong_consensus_rejected_at_round[t] += usize::from(rejected);
                }
                Cell::Correct { rejected } => {
                    ledger.correct_consensus_at_round[t] += 1;
                    ledger.correct_consensus_rejected_at_round[t] += usize::from(rejected);
                }
                Cell::Split => {}
            }
            ledger.introduced_wrong_singletons_by_round[t] += usize::from(rec.introduced[t]);
        }
    }
    let last = rounds - 1;
    ledger.wrong_consensus_total = ledger.wrong_consensus_at_round[last];
    ledger.wrong_consensus_rejected = ledger.wrong_consensus_rejected_at_round[last];
    ledger.correct_consensus_total = ledger.correct_consensus_at_round[last];
    ledger.correct_consensus_rejected = ledger.correct_consensus_rejected_at_round[last];
    ledger.introduced_wrong_singletons = ledger.introduced_wrong_singletons_by_round[last];
    ledger.net_ratio = net_ratio(ledger.wrong_consensus_rejected, ledger.introduced_wrong_singletons);
    Ok(ledger)
}

/// Fraction of outcomes stopping at each round `0..num_rounds`.
pub fn stopping_round_distribution(outcomes: &[StopOutcome], num_rounds: usize) -> Result<Vec<f64>, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut counts = vec![0usize; num_rounds];
    for o in outcomes {
        counts[o.stop_round.min(num_rounds - 1)] += 1;
    }
    Ok(counts.iter().map(|&c| ratio(c, outcomes.len())).collect())
}

/// One stopping rule's behaviour over a test set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StopSummary {
    pub rule: StopRule,
    pub n: usize,
    /// Mean stop round; unresolved records count at the final round.
    #[serde(serialize_with = "six")]
    pub avg_round: f64,
    /// Unanimity (consensus) or a singleton set (conformal).
    #[serde(serialize_with = "six")]
    pub resolved_rate: f64,
    /// Consensus: accuracy of the committed answer over all records.
    /// Conformal: accuracy among records that reached a singleton.
    #[serde(serialize_with = "six_opt")]
    pub accuracy: Option<f64>,
    /// Records handed to a human instead of acted on.
    #[serde(serialize_with = "six")]
    pub escalation_rate: f64,
}

pub fn summarize_stops(rule: StopRule, outcomes: &[StopOutcome], truths: &[usize]) -> Result<StopSummary, EvalError> {
    let n = outcomes.len();
    if n == 0 {
        return Err(EvalError::EmptyCorpus);
    }
    let avg_round = outcomes.iter().map(|o| o.stop_round as f64).sum::<f64>() / n as f64;
    let resolved = outcomes.iter().filter(|o| o.resolved).count();
    let (acted, correct) = outcomes.iter().zip(truths).fold((0, 0), |(a, c), (o, &truth)| {
        let acts = match rule {
            StopRule::Consensus => o.answer.is_some(),
            StopRule::Conformal => o.resolved,
        };
        if acts {
            (a + 1, c + usize::from(o.answer == Some(truth)))
        } else {
            (a, c)
        }
    });
    Ok(StopSummary {
        rule,
        n,
        avg_round,
        resolved_rate: ratio(resolved, n),
        accuracy: ratio_opt(correct, acted),
        escalation_rate: ratio(n - acted, n),
    })
}

/// Consensus versus conformal stopping on the same records.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StopComparison {
    pub partition: String,
    #[serde(serialize_with = "six")]
    pub alpha: f64,
    pub consensus: StopSummary,
    pub conformal: StopSummary,
    /// Conformal accuracy minus consensus accuracy.
    #[serde(serialize_with = "six_opt")]
    pub delta_accuracy: Option<f64>,
}

pub fn compare_stopping<D: Borrow<DebateRecord> + Sync>(
    test_records: &[D],
    per_round_cal: &BTreeMap<usize, CalibrationResult>,
    weighting: Weighting,
) -> Result<StopComparison, EvalError> {
    let first = test_records.first().ok_or(EvalError::EmptyCorpus)?.borrow();
    let truths = test_records.iter().map(|r| truth_of(r.borrow())).collect::<Result<Vec<_>, _>>()?;
    let consensus: Vec<StopOutcome> = test_records.par_iter().map(|r| consensus_stop(r.borrow())).collect();
    let conformal = conformal_outcomes(test_records, per_round_cal, weighting)?;
    let consensus = summarize_stops(StopRule::Consensus, &consensus, &truths)?;
    let conformal = summarize_stops(StopRule::Conformal, &conformal, &truths)?;
    let delta_accuracy = conformal.accuracy.zip(consensus.accuracy).map(|(a, b)| a - b);
    Ok(StopComparison {
        partition: first.partition().to_string(),
        alpha: alpha_of(per_round_cal),
        consensus,
        conformal,
        delta_accuracy,
    })
}

fn check_unique_ids<D: Borrow<DebateRecord>>(records: &[D]) -> Result<(), EvalError> {
    let mut seen = HashSet::new();
    for r in records {
        let id = r.borrow().question_id();
        if !seen.insert(id) {
            return Err(EvalError::DuplicateQuestionId(id.to_string()));
        }
    }
    Ok(())
}

/// Records grouped by partition value, in sorted partition order.
fn group_by_partition<'a>(
    records: &'a [DebateRecord],
    partition_key: &str,
) -> Result<BTreeMap<String, Vec<&'a DebateRecord>>, EvalError> {
    let mut groups: BTreeMap<String, Vec<&DebateRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(partition_of(r, partition_key)?).or_default().push(r);
    }
    for members in groups.values() {
        check_unique_ids(members)?;
    }
    Ok(groups)
}
