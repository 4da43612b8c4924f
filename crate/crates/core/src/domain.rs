//! Domain types shared by every stage of the pipeline.
//!
//! All vectors are stored in the fixed label-index order of a [`LabelSpace`];
//! nothing here ever reorders labels after ingestion.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance on the sum-to-one invariant of a [`Distribution`].
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Negative entries no smaller than `-CLAMP_TOLERANCE` are treated as rounding noise and clamped to zero.
pub const CLAMP_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("distribution has {got} entries but the label space has {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("probability at index {index} is negative ({value})")]
    NegativeMass { index: usize, value: f64 },
    #[error("probability at index {index} is not finite")]
    NonFinite { index: usize },
    #[error("probabilities sum to {sum}, outside 1 ± {SUM_TOLERANCE}")]
    SumOutOfTolerance { sum: f64 },
    #[error("invalid label space: {0}")]
    InvalidLabelSpace(String),
    #[error("invalid weight vector: {0}")]
    InvalidWeights(String),
    #[error("incomplete or inconsistent debate record `{question_id}`: {reason}")]
    InvalidRecord { question_id: String, reason: String },
    #[error("invalid configuration field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
}

/// Ordered, finite set of answer labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSpace {
    labels: Vec<String>,
}

impl LabelSpace {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self, DomainError> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(DomainError::InvalidLabelSpace(format!(
                "need at least 2 labels, got {}",
                labels.len()
            )));
        }
        let mut seen = HashSet::new();
        for label in &labels {
            if label.trim().is_empty() {
                return Err(DomainError::InvalidLabelSpace("empty label".into()));
            }
            if !seen.insert(label.as_str()) {
                return Err(DomainError::InvalidLabelSpace(format!("duplicate label `{label}`")));
            }
        }
        Ok(Self { labels })
    }

    /// `A`, `B`, `C`, ... for `k` labels (2 ≤ k ≤ 26).
    pub fn letters(k: usize) -> Result<Self, DomainError> {
        if k > 26 {
            return Err(DomainError::InvalidLabelSpace(format!("letters only cover 26 labels, asked for {k}")));
        }
        Self::new((0..k).map(|i| ((b'A' + i as u8) as char).to_string()))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

impl TryFrom<Vec<String>> for LabelSpace {
    type Error = DomainError;

    fn try_from(labels: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(labels)
    }
}

impl From<LabelSpace> for Vec<String> {
    fn from(space: LabelSpace) -> Self {
        space.labels
    }
}

/// Index of the largest entry, ties resolved toward the lowest index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Argmax {
    pub index: usize,
    /// Another label shares the maximal value.
    pub tied: bool,
}

pub(crate) fn argmax_of(values: &[f64]) -> Argmax {
    let mut index = 0;
    let mut tied = false;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[index] {
            index = i;
            tied = false;
        } else if v == values[index] {
            tied = true;
        }
    }
    Argmax { index, tied }
}

/// Probability vector over a label space.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Checks `probs` against the distribution invariants for a label space of size `k`.
    ///
    /// Entries in `[-1e-12, 0)` are clamped to zero first.
    pub fn validate(probs: Vec<f64>, k: usize) -> Result<Self, DomainError> {
        if probs.len() != k {
            return Err(DomainError::LengthMismatch { expected: k, got: probs.len() });
        }
        let mut probs = probs;
        for (index, p) in probs.iter_mut().enumerate() {
            if !p.is_finite() {
                return Err(DomainError::NonFinite { index });
            }
            if *p < 0.0 {
                if *p >= -CLAMP_TOLERANCE {
                    *p = 0.0;
                } else {
                    return Err(DomainError::NegativeMass { index, value: *p });
                }
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(DomainError::SumOutOfTolerance { sum });
        }
        for p in &mut probs {
            *p = p.min(1.0);
        }
        Ok(Self { probs })
    }

    pub fn uniform(k: usize) -> Self {
        Self { probs: vec![1.0 / k as f64; k] }
    }

    pub fn point_mass(k: usize, index: usize) -> Self {
        let mut probs = vec![0.0; k];
        probs[index] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<f64> {
        self.probs.get(index).copied()
    }

    pub fn argmax(&self) -> Argmax {
        argmax_of(&self.probs)
    }

    /// Largest and second-largest probabilities.
    pub fn top_two(&self) -> (f64, f64) {
        let mut first = f64::NEG_INFINITY;
        let mut second = f64::NEG_INFINITY;
        for &p in &self.probs {
            if p > first {
                second = first;
                first = p;
            } else if p > second {
                second = p;
            }
        }
        (first, second)
    }

    pub fn is_uniform(&self) -> bool {
        let u = 1.0 / self.probs.len() as f64;
        self.probs.iter().all(|&p| p == u)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

/// Validates a raw probability vector for a label space of size `k`.
pub fn validate_distribution(probs: Vec<f64>, k: usize) -> Result<Distribution, DomainError> {
    Distribution::validate(probs, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Parsed,
    Renormalized,
    FallbackUniform,
}

/// One agent's belief at one debate round, with its parse provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentRoundBelief {
    pub agent_id: String,
    pub round: usize,
    pub dist: Distribution,
    pub parse_status: ParseStatus,
    pub raw_text: Option<String>,
}

impl AgentRoundBelief {
    pub fn new(agent_id: impl Into<String>, round: usize, dist: Distribution, parse_status: ParseStatus) -> Self {
        Self { agent_id: agent_id.into(), round, dist, parse_status, raw_text: None }
    }

    pub fn with_raw_text(mut self, raw: impl Into<String>) -> Self {
        self.raw_text = Some(raw.into());
        self
    }

    pub fn fallback(agent_id: impl Into<String>, round: usize, k: usize) -> Self {
        Self::new(agent_id, round, Distribution::uniform(k), ParseStatus::FallbackUniform)
    }
}

pub const DEFAULT_PARTITION: &str = "default";

/// A full multi-round debate over one question.
///
/// `beliefs[t][i]` is agent `i` at round `t`. The table is checked for completeness at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DebateRecord {
    question_id: String,
    partition: String,
    meta: BTreeMap<String, String>,
    label_space: LabelSpace,
    truth: Option<usize>,
    beliefs: Vec<Vec<AgentRoundBelief>>,
}

impl DebateRecord {
    pub fn new(
        question_id: impl Into<String>,
        label_space: LabelSpace,
        truth: Option<usize>,
        beliefs: Vec<Vec<AgentRoundBelief>>,
    ) -> Result<Self, DomainError> {
        let question_id = question_id.into();
        let invalid = |reason: String| DomainError::InvalidRecord { question_id: question_id.clone(), reason };
        let k = label_space.len();
        if let Some(t) = truth {
            if t >= k {
                return Err(invalid(format!("truth index {t} outside label space of size {k}")));
            }
        }
        let first = beliefs.first().ok_or_else(|| invalid("no rounds".into()))?;
        if first.is_empty() {
            return Err(invalid("no agents".into()));
        }
        let ids: Vec<&str> = first.iter().map(|b| b.agent_id.as_str()).collect();
        let unique: HashSet<&str> = ids.iter().copied().collect();
        if unique.len() != ids.len() {
            return Err(invalid("duplicate agent ids".into()));
        }
        for (t, round) in beliefs.iter().enumerate() {
            if round.len() != ids.len() {
                return Err(invalid(format!("round {t} has {} agents, expected {}", round.len(), ids.len())));
            }
            for (i, belief) in round.iter().enumerate() {
                if belief.agent_id != ids[i] {
                    return Err(invalid(format!(
                        "round {t} slot {i} holds agent `{}`, expected `{}`",
                        belief.agent_id, ids[i]
                    )));
                }
                if belief.round != t {
                    return Err(invalid(format!("belief in round slot {t} claims round {}", belief.round)));
                }
                if belief.dist.len() != k {
                    return Err(invalid(format!(
                        "agent `{}` round {t} has {} probabilities, label space has {k}",
                        belief.agent_id,
                        belief.dist.len()
                    )));
                }
                if belief.parse_status == ParseStatus::FallbackUniform && !belief.dist.is_uniform() {
                    return Err(invalid(format!(
                        "agent `{}` round {t} is marked fallback_uniform but is not uniform",
                        belief.agent_id
                    )));
                }
            }
        }
        Ok(Self {
            question_id,
            partition: DEFAULT_PARTITION.to_string(),
            meta: BTreeMap::new(),
            label_space,
            truth,
            beliefs,
        })
    }

    pub fn with_partition(mut self, partition: impl Into<String>) -> Self {
        self.partition = partition.into();
        self
    }

    pub fn with_meta(mut self, meta: BTreeMap<String, String>) -> Self {
        self.meta = meta;
        self
    }

    pub fn question_id(&self) -> &str {
        &self.question_id
    }

    pub fn partition(&self) -> &str {
        &self.partition
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.label_space
    }

    pub fn truth(&self) -> Option<usize> {
        self.truth
    }

    pub fn num_agents(&self) -> usize {
        self.beliefs[0].len()
    }

    pub fn num_rounds(&self) -> usize {
        self.beliefs.len()
    }

    pub fn num_labels(&self) -> usize {
        self.label_space.len()
    }

    pub fn round(&self, t: usize) -> &[AgentRoundBelief] {
        &self.beliefs[t]
    }

    pub fn rounds(&self) -> &[Vec<AgentRoundBelief>] {
        &self.beliefs
    }

    pub fn belief(&self, t: usize, agent: usize) -> &AgentRoundBelief {
        &self.beliefs[t][agent]
    }

    pub fn round_dists(&self, t: usize) -> Vec<&Distribution> {
        self.beliefs[t].iter().map(|b| &b.dist).collect()
    }

    pub fn agent_ids(&self) -> impl Iterator<Item = &str> {
        self.beliefs[0].iter().map(|b| b.agent_id.as_str())
    }
}

/// Non-negative agent weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct WeightVector {
    weights: Vec<f64>,
}

impl WeightVector {
    /// Accepts any non-negative vector within [`SUM_TOLERANCE`] of unit mass; the stored weights are rescaled to sum to one.
    pub fn new(weights: Vec<f64>) -> Result<Self, DomainError> {
        if weights.is_empty() {
            return Err(DomainError::InvalidWeights("no weights".into()));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(DomainError::InvalidWeights(format!("weight {w} is negative or not finite")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(DomainError::InvalidWeights(format!("weights sum to {sum}")));
        }
        Ok(Self::from_unnormalized(weights, sum))
    }

    pub(crate) fn from_unnormalized(weights: Vec<f64>, sum: f64) -> Self {
        if sum == 1.0 {
            return Self { weights };
        }
        Self { weights: weights.into_iter().map(|w| w / sum).collect() }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// `1 - P(y)`.
    #[default]
    Prob,
    /// Cumulative mass through y's rank.
    Rank,
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreKind::Prob => "prob",
            ScoreKind::Rank => "rank",
        })
    }
}

/// A calibrated conformal threshold for one (α, round, score kind).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub alpha: f64,
    pub round: usize,
    pub score_kind: ScoreKind,
    pub q_hat: f64,
    pub n_cal: usize,
    /// The corrected quantile level exceeded 1, so `q_hat` was pinned to the score maximum.
    pub saturated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    /// Singleton set: act on the single answer.
    Automate,
    /// Several plausible answers: hand the pruned set to a human.
    Escalate,
    /// Nothing conforms: full manual review.
    FullReview,
}

impl Action {
    pub fn for_set_size(size: usize) -> Self {
        match size {
            0 => Action::FullReview,
            1 => Action::Automate,
            _ => Action::Escalate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    members: Vec<usize>,
    action: Action,
    /// Inclusion threshold `1 - q_hat` on the social probability (probability score only).
    tau: Option<f64>,
}

impl PredictionSet {
    /// `members` must be ascending label indices.
    pub fn new(members: Vec<usize>, tau: Option<f64>) -> Self {
        debug_assert!(members.windows(2).all(|w| w[0] < w[1]));
        let action = Action::for_set_size(members.len());
        Self { members, action, tau }
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, label: usize) -> bool {
        self.members.binary_search(&label).is_ok()
    }

    pub fn action(&self) -> Action {
        self.action
    }

    pub fn tau(&self) -> Option<f64> {
        self.tau
    }

    pub fn singleton(&self) -> Option<usize> {
        match self.members.as_slice() {
            [only] => Some(*only),
            _ => None,
        }
    }

    pub fn is_subset_of(&self, other: &PredictionSet) -> bool {
        self.members.iter().all(|m| other.contains(*m))
    }
}

/// How agent beliefs are weighted in the opinion pool.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Uniform,
    /// `w_i ∝ exp(-λ H(π_i))`, natural-log entropy.
    Entropy { lambda: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub alphas: Vec<f64>,
    pub num_rounds: usize,
    pub split_ratio: f64,
    pub seed: u64,
    pub weighting: Weighting,
    pub score_kind: ScoreKind,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            alphas: vec![0.05, 0.10],
            num_rounds: 4,
            split_ratio: 0.5,
            seed: 0,
            weighting: Weighting::Uniform,
            score_kind: ScoreKind::Prob,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.alphas.is_empty() {
            return Err(DomainError::InvalidConfig { field: "alphas", reason: "at least one alpha required".into() });
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(DomainError::InvalidConfig { field: "alphas", reason: format!("{a} is not in (0, 1)") });
        }
        if self.num_rounds == 0 {
            return Err(DomainError::InvalidConfig { field: "rounds", reason: "must be at least 1".into() });
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(DomainError::InvalidConfig {
                field: "split_ratio",
                reason: format!("{} is not in (0, 1)", self.split_ratio),
            });
        }
        if let Weighting::Entropy { lambda } = self.weighting {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(DomainError::InvalidConfig { field: "lambda", reason: format!("{lambda} must be ≥ 0") });
            }
        }
        Ok(())
    }
}
