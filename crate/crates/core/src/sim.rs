//! Synthetic debate populations with controllable accuracy and sycophancy,
//! plus brute-force oracles used to cross-check the main pipeline.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{AgentRoundBelief, DebateRecord, Distribution, DomainError, LabelSpace, ParseStatus};
use crate::seeding::rng_for;

pub const DEFAULT_SIM_PARTITION: &str = "sim";
/// Logit gaps above this make `exp` underflow for the off-centre labels.
pub const MAX_CONCENTRATION: f64 = 200.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    pub num_labels: usize,
    pub num_agents: usize,
    pub num_rounds: usize,
    pub num_questions: usize,
    /// Per agent: probability its round-0 belief is centred on the truth.
    pub agent_accuracy: Vec<f64>,
    /// Logit advantage of the centre label; larger is sharper.
    pub concentration: f64,
    /// Weight on the previous round's pooled belief in each update.
    pub sycophancy: f64,
    /// Fraction of the update target replaced by a point mass on the pooled argmax.
    pub argmax_attraction: f64,
    pub seed: u64,
    pub partition: String,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            num_labels: 10,
            num_agents: 3,
            num_rounds: 4,
            num_questions: 1000,
            agent_accuracy: vec![0.7, 0.6, 0.5],
            concentration: 3.0,
            sycophancy: 0.3,
            argmax_attraction: 0.0,
            seed: 0,
            partition: DEFAULT_SIM_PARTITION.to_string(),
        }
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> DomainError {
    DomainError::InvalidConfig { field, reason: reason.into() }
}

impl SimParams {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.num_labels < 2 || self.num_labels > 26 {
            return Err(invalid("num_labels", format!("{} is not in [2, 26]", self.num_labels)));
        }
        if self.num_agents == 0 {
            return Err(invalid("num_agents", "must be at least 1"));
        }
        if self.num_rounds == 0 {
            return Err(invalid("num_rounds", "must be at least 1"));
        }
        if self.num_questions == 0 {
            return Err(invalid("num_questions", "must be at least 1"));
        }
        if self.agent_accuracy.len() != self.num_agents {
            return Err(invalid(
                "agent_accuracy",
                format!("{} values for {} agents", self.agent_accuracy.len(), self.num_agents),
            ));
        }
        if let Some(a) = self.agent_accuracy.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(invalid("agent_accuracy", format!("{a} is not in (0, 1)")));
        }
        if !(self.concentration > 0.0 && self.concentration <= MAX_CONCENTRATION) {
            return Err(invalid("concentration", format!("{} is not in (0, {MAX_CONCENTRATION}]", self.concentration)));
        }
        if !(0.0..=1.0).contains(&self.sycophancy) {
            return Err(invalid("sycophancy", format!("{} is not in [0, 1]", self.sycophancy)));
        }
        if !(0.0..=1.0).contains(&self.argmax_attraction) {
            return Err(invalid("argmax_attraction", format!("{} is not in [0, 1]", self.argmax_attraction)));
        }
        if self.partition.trim().is_empty() {
            return Err(invalid("partition", "must not be blank"));
        }
        Ok(())
    }
}

/// Logistic-normal draw: logits `concentration · [y = center] + N(0, 1)`, then softmax.
/// Every label keeps strictly positive mass.
pub fn sample_belief<R: Rng + ?Sized>(rng: &mut R, k: usize, center: usize, concentration: f64) -> Distribution {
    let logits: Vec<f64> = (0..k)
        .map(|y| {
            let noise: f64 = rng.sample(StandardNormal);
            noise + if y == center { concentration } else { 0.0 }
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    Distribution::validate(exp.iter().map(|e| e / sum).collect(), k).expect("softmax is a distribution")
}

fn mixture(values: Vec<f64>, k: usize) -> Distribution {
    Distribution::validate(values, k).expect("convex mixture of distributions")
}

fn simulate_question(params: &SimParams, index: usize, labels: &LabelSpace) -> DebateRecord {
    let k = params.num_labels;
    let mut rng = rng_for(params.seed, &[b"question", &(index as u64).to_le_bytes()]);
    let truth = rng.random_range(0..k);

    let mut current: Vec<Distribution> = params
        .agent_accuracy
        .iter()
        .map(|&acc| {
            let center = if rng.random::<f64>() < acc {
                truth
            } else {
                let wrong = rng.random_range(0..k - 1);
                if wrong >= truth {
                    wrong + 1
                } else {
                    wrong
                }
            };
            sample_belief(&mut rng, k, center, params.concentration)
        })
        .collect();

    let agent_ids: Vec<String> = (0..params.num_agents).map(|i| format!("agent-{i}")).collect();
    let as_round = |t: usize, dists: &[Distribution]| -> Vec<AgentRoundBelief> {
        agent_ids
            .iter()
            .zip(dists)
            .map(|(id, d)| AgentRoundBelief::new(id.clone(), t, d.clone(), ParseStatus::Parsed))
            .collect()
    };

    let mut rounds = vec![as_round(0, &current)];
    let n = params.num_agents as f64;
    let s = params.sycophancy;
    let a = params.argmax_attraction;
    for t in 1..params.num_rounds {
        let mut target = vec![0.0; k];
        for d in &current {
            for (acc, p) in target.iter_mut().zip(d.probs()) {
                *acc += p / n;
            }
        }
        if a > 0.0 {
            let top = crate::domain::argmax_of(&target).index;
            target.iter_mut().for_each(|p| *p *= 1.0 - a);
            target[top] += a;
        }
        current = current
            .iter()
            .map(|d| {
                let mixed = d.probs().iter().zip(&target).map(|(p, q)| (1.0 - s) * p + s * q).collect();
                mixture(mixed, k)
            })
            .collect();
        rounds.push(as_round(t, &current));
    }

    DebateRecord::new(format!("q{index:05}"), labels.clone(), Some(truth), rounds)
        .expect("simulated records are well formed")
        .with_partition(params.partition.clone())
}

/// Generates `num_questions` complete records, i.i.d. given the seed.
/// Each question draws from its own derived stream, so output does not depend on thread scheduling.
pub fn generate_population(params: &SimParams) -> Result<Vec<DebateRecord>, DomainError> {
    params.validate()?;
    let labels = LabelSpace::letters(params.num_labels)?;
    Ok((0..params.num_questions).into_par_iter().map(|i| simulate_question(params, i, &labels)).collect())
}

/// Reference implementations kept deliberately naive: a full sort for the
/// quantile and per-label loops for set membership.
pub mod oracle {
    use thiserror::Error;

    use crate::conformal::{check_alpha, ConformalError, LEVEL_SLACK};
    use crate::domain::{CalibrationResult, DebateRecord, ScoreKind};

    #[derive(Debug, Clone, PartialEq, Error)]
    pub enum OracleError {
        #[error("empty corpus")]
        EmptyCorpus,
        #[error("record `{0}` has no truth label")]
        MissingTruth(String),
        #[error(transparent)]
        Conformal(#[from] ConformalError),
    }

    pub fn oracle_quantile(scores: &[f64], alpha: f64) -> Result<f64, ConformalError> {
        check_alpha(alpha)?;
        if scores.is_empty() {
            return Err(ConformalError::EmptyCalibrationSet);
        }
        if let Some(&s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(ConformalError::NonFiniteScore(s));
        }
        let n = scores.len();
        let level = (n as f64 + 1.0) * (1.0 - alpha) - LEVEL_SLACK;
        let mut rank = 1usize;
        while (rank as f64) < level {
            rank += 1;
        }
        if rank > n {
            return Ok(1.0);
        }
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(sorted[rank - 1])
    }

    /// Equal-weight pool computed directly from the raw agent beliefs.
    fn pooled(record: &DebateRecord, round: usize) -> Vec<f64> {
        let n = record.num_agents() as f64;
        let mut out = vec![0.0; record.num_labels()];
        for belief in record.round(round) {
            for (y, p) in belief.dist.probs().iter().enumerate() {
                out[y] += p / n;
            }
        }
        out
    }

    fn label_score(p: &[f64], y: usize, kind: ScoreKind) -> f64 {
        match kind {
            ScoreKind::Prob => 1.0 - p[y],
            // Mass of every label ranked at or above y (higher probability, or equal with a lower index).
            ScoreKind::Rank => {
                let mut mass = 0.0;
                for (j, &pj) in p.iter().enumerate() {
                    if pj > p[y] || (pj == p[y] && j <= y) {
                        mass += pj;
                    }
                }
                mass
            }
        }
    }

    /// Fraction of records whose round-`round` set, rebuilt label by label
    /// from equal-weight pooled beliefs, contains the truth.
    pub fn oracle_coverage(records: &[DebateRecord], cal: &CalibrationResult, round: usize) -> Result<f64, OracleError> {
        if records.is_empty() {
            return Err(OracleError::EmptyCorpus);
        }
        let mut covered = 0usize;
        for record in records {
            let truth = record.truth().ok_or_else(|| OracleError::MissingTruth(record.question_id().to_string()))?;
            let p = pooled(record, round);
            let mut in_set = false;
            for y in 0..p.len() {
                if y == truth && label_score(&p, y, cal.score_kind) <= cal.q_hat {
                    in_set = true;
                }
            }
            if in_set {
                covered += 1;
            }
        }
        Ok(covered as f64 / records.len() as f64)
    }
}
